import logging
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from advknn.config import settings
from advknn.core.container import read_container, write_container
from advknn.core.exceptions import ContractError, FingerprintMismatchError
from advknn.core.parallel import chunk_bounds, run_parallel
from advknn.models.dataset_models import Dataset
from advknn.models.neighbor_models import CalibrationTable, DknnModel, FeatureDatabase
from advknn.models.network_models import TrainedNetwork
from advknn.services.network import extract_features, forward_with_activations
from advknn.services.neighbors import vote_counts_batch

logger = logging.getLogger(__name__)

CALIBRATION_KIND = "calibration"


class DknnVotes(NamedTuple):
    logits: np.ndarray       # [n, C] base network output
    counts: np.ndarray       # [n, L, C] per-layer neighbor label counts
    scores: np.ndarray       # [n, C] summed vote fractions over layers
    labels: np.ndarray       # [n] ensemble prediction
    knn_labels: np.ndarray   # [n, L] per-layer kNN prediction


class DknnPrediction(NamedTuple):
    label: int
    scores: np.ndarray


def _check_fingerprints(network: TrainedNetwork, databases: Sequence[FeatureDatabase]) -> None:
    for db in databases:
        if db.network_fingerprint != network.fingerprint:
            raise FingerprintMismatchError(
                f"layer {db.layer} database was built by network {db.network_fingerprint}, "
                f"not {network.fingerprint}")


def build_dknn_model(network: TrainedNetwork, databases: Sequence[FeatureDatabase], k: int,
                     layers: Optional[Sequence[int]] = None) -> DknnModel:
    """Ensemble over ``layers`` (all supplied databases by default)."""
    chosen = list(databases) if layers is None else [db for db in databases if db.layer in set(layers)]
    if layers is not None and len(chosen) != len(set(layers)):
        missing = sorted(set(layers) - {db.layer for db in chosen})
        raise ContractError(f"no database for ensemble layers {missing}")
    _check_fingerprints(network, chosen)
    return DknnModel(network=network, databases=sorted(chosen, key=lambda db: db.layer), k=k)


def _as_batch(model: DknnModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x[None] if x.ndim == len(model.network.config.input_shape) else x


def dknn_vote_counts(model: DknnModel, images: np.ndarray, workers: int = 1) -> DknnVotes:
    """Per-layer neighbor votes for a batch, one forward pass per chunk."""
    _check_fingerprints(model.network, model.databases)
    images = _as_batch(model, images)
    c = model.num_classes

    def run(chunk: slice):
        acts = forward_with_activations(model.network, images[chunk])
        counts = np.stack([vote_counts_batch(db, acts.activations[db.layer], model.k) for db in model.databases],
                          axis=1)
        return acts.logits, counts

    chunks = chunk_bounds(images.shape[0], settings.inference_batch_size)
    parts = run_parallel(run, chunks, workers=workers)
    if parts:
        logits = np.concatenate([p[0] for p in parts])
        counts = np.concatenate([p[1] for p in parts])
    else:
        logits = np.zeros((0, c))
        counts = np.zeros((0, model.num_layers, c), dtype=np.int64)
    scores = counts.sum(axis=1) / model.k
    return DknnVotes(logits=logits, counts=counts, scores=scores,
                     labels=np.argmax(scores, axis=1).astype(np.int64),
                     knn_labels=np.argmax(counts, axis=2).astype(np.int64))


def dknn_predict_batch(model: DknnModel, images: np.ndarray, workers: int = 1) -> DknnVotes:
    return dknn_vote_counts(model, images, workers=workers)


def dknn_predict(model: DknnModel, x: np.ndarray) -> DknnPrediction:
    """argmax over classes of the layer-summed vote fractions; ties go to the lowest class."""
    votes = dknn_vote_counts(model, x)
    return DknnPrediction(label=int(votes.labels[0]), scores=votes.scores[0])


def build_calibration(model: DknnModel, calibration: Dataset, workers: int = 1) -> CalibrationTable:
    if len(calibration) == 0:
        raise ContractError("cannot calibrate on an empty calibration set")
    votes = dknn_vote_counts(model, calibration.images, workers=workers)
    scores = votes.scores[np.arange(len(calibration)), calibration.labels]
    table = CalibrationTable(scores=scores, num_layers=model.num_layers, k=model.k,
                             network_fingerprint=model.network.fingerprint)
    logger.info(f"Calibration table: {table.size} samples, mean true-class score {scores.mean():.4f}")
    return table


def credibility_from_scores(table: CalibrationTable, scores: np.ndarray) -> np.ndarray:
    """Fraction of calibration scores strictly below each predicted-class score."""
    below = np.searchsorted(table.sorted_scores, np.asarray(scores, dtype=np.float64), side="left")
    return below / table.size


def credibility(model: DknnModel, table: CalibrationTable, x: np.ndarray) -> float:
    prediction = dknn_predict(model, x)
    return float(credibility_from_scores(table, prediction.scores[prediction.label]))


class SuiteOutput(NamedTuple):
    dnn: np.ndarray
    knn: np.ndarray
    dknn: np.ndarray
    credibility: np.ndarray


class DefenseSuite:
    """The three defended classifiers of one network plus its credibility calibration."""

    def __init__(self, model: DknnModel, table: CalibrationTable, knn_database: FeatureDatabase):
        _check_fingerprints(model.network, [knn_database])
        if table.network_fingerprint and table.network_fingerprint != model.network.fingerprint:
            raise FingerprintMismatchError("calibration table belongs to a different network")
        if table.num_layers != model.num_layers:
            raise ContractError(f"calibration table covers {table.num_layers} layers, ensemble has {model.num_layers}")
        self.model = model
        self.table = table
        self.knn_database = knn_database

    @property
    def network(self) -> TrainedNetwork:
        return self.model.network

    @property
    def knn_layer(self) -> int:
        return self.knn_database.layer

    def classify(self, images: np.ndarray, workers: int = 1) -> SuiteOutput:
        images = _as_batch(self.model, images)
        votes = dknn_vote_counts(self.model, images, workers=workers)
        if self.knn_layer in self.model.layers:
            knn = votes.knn_labels[:, self.model.layers.index(self.knn_layer)]
        else:
            feats = extract_features(self.network, images, self.knn_layer, workers=workers)
            knn = np.argmax(vote_counts_batch(self.knn_database, feats, self.model.k, workers=workers), axis=1)
        n = images.shape[0]
        predicted = votes.scores[np.arange(n), votes.labels]
        return SuiteOutput(
            dnn=np.argmax(votes.logits, axis=1).astype(np.int64),
            knn=np.asarray(knn, dtype=np.int64),
            dknn=votes.labels,
            credibility=credibility_from_scores(self.table, predicted),
        )


def save_calibration(table: CalibrationTable, path: Path, layers: List[int], run_config: Optional[dict] = None,
                     fingerprint: str = "") -> Path:
    meta = {"num_layers": table.num_layers, "k": table.k, "layers": list(layers),
            "network_fingerprint": table.network_fingerprint}
    return write_container(path, CALIBRATION_KIND, {"scores": table.scores.astype(np.float64)},
                           fingerprint=fingerprint, config=run_config, meta=meta)


def load_calibration(path: Path) -> CalibrationTable:
    container = read_container(path, kind=CALIBRATION_KIND)
    meta = container.meta
    return CalibrationTable(scores=container["scores"], num_layers=meta["num_layers"], k=meta["k"],
                            network_fingerprint=meta["network_fingerprint"])
