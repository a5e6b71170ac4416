"""
Differentiable stand-in for a layer's kNN classifier.

The head maps a capture-point feature f to q = softmax(W^T f + b) and is fit to
the leave-one-out neighbor vote distribution p of every training sample with

    total = lambda * CLS(q, t) + CL(p, q)

where t = argmax p, CLS is the clamped cross-entropy -log q_t and CL is the
clamped KL divergence sum_i p_i (log p_i - log q_i) averaged over the batch.
"""
import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np
from tqdm import tqdm

from advknn.config import settings
from advknn.core import autodiff as ad
from advknn.core.container import read_container, write_container
from advknn.core.exceptions import (ContractError, DistributionError, FingerprintMismatchError, NumericError,
                                    TrainingError)
from advknn.core.parallel import chunk_bounds
from advknn.models.common_models import DistanceMetric
from advknn.models.dataset_models import Dataset
from advknn.models.neighbor_models import FeatureDatabase
from advknn.models.network_models import TrainedNetwork
from advknn.models.surrogate_models import SurrogateHead, SurrogateReport, SurrogateTrainConfig
from advknn.services.network import LossHead, extract_features
from advknn.services.neighbors import knn_predict_batch, vote_counts_batch

logger = logging.getLogger(__name__)

SURROGATE_KIND = "surrogate"
_SUM_TOLERANCE = 1e-6


def _distribution(name: str, values: np.ndarray) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    if array.ndim == 1:
        array = array[None, :]
    if array.ndim != 2 or array.shape[1] < 1:
        raise DistributionError(f"{name} must be a length-C vector or an [n, C] matrix")
    if not np.all(np.isfinite(array)) or np.any(array < 0):
        raise DistributionError(f"{name} has negative or non-finite entries")
    if np.any(np.abs(array.sum(axis=1) - 1.0) > _SUM_TOLERANCE):
        raise DistributionError(f"{name} rows must sum to 1")
    return array


def _labels(t: Union[int, np.ndarray], rows: int, num_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if labels.shape[0] == 1 and rows > 1:
        labels = np.full(rows, labels[0])
    if labels.shape[0] != rows or labels.min() < 0 or labels.max() >= num_classes:
        raise DistributionError(f"labels must be {rows} values in [0, {num_classes})")
    return labels


def _scalar_or_rows(value: ad.Tensor, reduction: str):
    return value.numpy().copy() if reduction == "none" else value.item()


def loss_cls(q: np.ndarray, t: Union[int, np.ndarray], reduction: str = "mean"):
    """-log max(q_t, 1e-12)."""
    q = _distribution("q", q)
    target = ad.one_hot(_labels(t, q.shape[0], q.shape[1]), q.shape[1], dtype=np.float64)
    return _scalar_or_rows(ad.cross_entropy(ad.Tensor(q), target, reduction=reduction), reduction)


def loss_cl(p: np.ndarray, q: np.ndarray, reduction: str = "mean"):
    """KL(p || q) with 0 log 0 = 0 and q clamped at 1e-12."""
    p = _distribution("p", p)
    q = _distribution("q", q)
    if p.shape != q.shape:
        raise DistributionError(f"p has shape {list(p.shape)} but q has {list(q.shape)}")
    return _scalar_or_rows(ad.kl_div(p, ad.Tensor(q), reduction=reduction), reduction)


def total_loss(p: np.ndarray, q: np.ndarray, t: Union[int, np.ndarray], lambda_weight: float,
               reduction: str = "mean"):
    if lambda_weight < 0:
        raise DistributionError(f"lambda must be non-negative, got {lambda_weight}")
    return lambda_weight * loss_cls(q, t, reduction=reduction) + loss_cl(p, q, reduction=reduction)


def surrogate_objective(features: ad.Tensor, weight: ad.Tensor, bias: ad.Tensor, p: np.ndarray, t: np.ndarray,
                        lambda_weight: float, use_consistency: bool = True, reduction: str = "mean") -> ad.Tensor:
    """Training loss of the head as a graph node; differentiable in features, weight and bias."""
    q = ad.softmax(ad.affine(features, weight, bias))
    dtype = q.dtype
    parts = []
    if lambda_weight > 0:
        target = ad.one_hot(t, q.shape[1], dtype=dtype)
        parts.append(ad.mul(ad.cross_entropy(q, target, reduction=reduction), lambda_weight))
    if use_consistency:
        parts.append(ad.kl_div(np.asarray(p, dtype=dtype), q, reduction=reduction))
    if not parts:
        raise ContractError("surrogate objective is empty: enable consistency or use lambda > 0")
    loss = parts[0]
    for part in parts[1:]:
        loss = ad.add(loss, part)
    return loss


def head_probabilities(head: SurrogateHead, features: np.ndarray) -> np.ndarray:
    with ad.inference():
        q = ad.softmax(ad.affine(ad.Tensor(features, dtype=head.weight.dtype), ad.Tensor(head.weight),
                                 ad.Tensor(head.bias)))
    return q.numpy()


def neighbor_targets(db: FeatureDatabase, k: int, workers: int = 1) -> np.ndarray:
    """Leave-one-out vote counts [M, C] of every database row."""
    return vote_counts_batch(db, db.features, k, exclude=np.arange(db.size), workers=workers)


def train_surrogate(net: TrainedNetwork, db: FeatureDatabase, train: Dataset,
                    cfg: Optional[SurrogateTrainConfig] = None, workers: int = 1) -> SurrogateHead:
    """Fit a head on layer ``db.layer`` of the frozen network to the database's neighbor votes.

    SGD runs on features rescaled to unit mean squared norm; the scale is folded
    back into the stored weight, so the head is a plain affine map of raw features.
    """
    cfg = cfg or SurrogateTrainConfig()
    if db.network_fingerprint != net.fingerprint:
        raise FingerprintMismatchError(f"database was built by network {db.network_fingerprint}, not {net.fingerprint}")
    if db.sample_indices.max() >= len(train) or not np.array_equal(db.labels, train.labels[db.sample_indices]):
        raise ContractError("feature database was not built from this training set")

    counts = neighbor_targets(db, cfg.k, workers=workers)
    p_all = counts / cfg.k
    t_all = np.argmax(counts, axis=1)
    features = db.features
    dtype = features.dtype
    scale = float(np.sqrt(np.mean(np.einsum("ij,ij->i", features.astype(np.float64), features)))) or 1.0

    rng = np.random.default_rng(cfg.seed)
    weight = np.zeros((db.width, db.num_classes), dtype=dtype)
    bias = np.zeros(db.num_classes, dtype=dtype)
    m = db.size
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(m)
        total = 0.0
        for chunk in tqdm(chunk_bounds(m, cfg.batch_size), desc=f"surrogate {epoch}/{cfg.epochs}", leave=False,
                          disable=not settings.progress):
            idx = order[chunk]
            try:
                with ad.Graph() as graph:
                    w = graph.leaf(weight)
                    b = graph.leaf(bias)
                    f = graph.constant(features[idx] / dtype.type(scale), dtype=dtype)
                    loss = surrogate_objective(f, w, b, p_all[idx], t_all[idx], cfg.lambda_weight,
                                               cfg.use_consistency)
                    grads = ad.backward(loss, [w, b])
            except NumericError as e:
                raise TrainingError(f"surrogate training diverged in epoch {epoch}: {e}", epoch=epoch) from e
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"surrogate loss became {value} in epoch {epoch}", epoch=epoch)
            weight = (weight - cfg.learning_rate * grads[w.node_id].numpy()).astype(dtype)
            bias = (bias - cfg.learning_rate * grads[b.node_id].numpy()).astype(dtype)
            total += value * len(idx)
        logger.info(f"Surrogate epoch {epoch}/{cfg.epochs} loss {total / m:.5f}")

    return SurrogateHead(weight=(weight / dtype.type(scale)).astype(dtype), bias=bias, layer=db.layer,
                         database_fingerprint=db.fingerprint, network_fingerprint=net.fingerprint,
                         use_consistency=cfg.use_consistency, lambda_weight=cfg.lambda_weight, metric=db.metric)


def evaluate_surrogate(net: TrainedNetwork, head: SurrogateHead, db: FeatureDatabase, test: Dataset, k: int,
                       workers: int = 1) -> SurrogateReport:
    """Agreement of argmax q with the kNN label, and accuracy against ground truth."""
    if head.database_fingerprint != db.fingerprint:
        raise FingerprintMismatchError("surrogate head was trained on a different feature database")
    if len(test) == 0:
        return SurrogateReport(agreement=0.0, accuracy=0.0, samples=0)
    features = extract_features(net, test.images, head.layer, workers=workers)
    predicted = np.argmax(head_probabilities(head, features), axis=1)
    knn = knn_predict_batch(db, features, k, workers=workers)
    report = SurrogateReport(agreement=float(np.mean(predicted == knn)),
                             accuracy=float(np.mean(predicted == test.labels)), samples=len(test))
    logger.info(f"Surrogate agreement with kNN {report.agreement:.4f}, accuracy {report.accuracy:.4f}")
    return report


class SurrogateLossHead(LossHead):
    """Cross-entropy of the head's softmax against the true labels, summed over the batch."""

    def __init__(self, head: SurrogateHead):
        self.head = head
        self.layer = head.layer
        self._weight = ad.Tensor(head.weight)
        self._bias = ad.Tensor(head.bias)

    def loss(self, feature: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
        q = ad.softmax(ad.affine(feature, self._weight, self._bias))
        return ad.cross_entropy(q, ad.one_hot(labels, q.shape[1], dtype=q.dtype), reduction="sum")


def save_surrogate(head: SurrogateHead, path: Path, run_config: Optional[dict] = None, fingerprint: str = "") -> Path:
    meta = head.model_dump(mode="json", exclude={"weight", "bias"})
    return write_container(path, SURROGATE_KIND, {"weight": head.weight, "bias": head.bias},
                           fingerprint=fingerprint, config=run_config, meta=meta)


def load_surrogate(path: Path) -> SurrogateHead:
    container = read_container(path, kind=SURROGATE_KIND)
    meta = dict(container.meta)
    meta["metric"] = DistanceMetric(meta.get("metric", DistanceMetric.EUCLIDEAN.value))
    head = SurrogateHead(weight=container["weight"], bias=container["bias"], **meta)
    logger.info(f"Loaded layer {head.layer} surrogate head from {path}")
    return head
