import logging
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import pandas as pd

from advknn.config import settings
from advknn.core.container import read_container, write_container
from advknn.core.exceptions import AttackError, FingerprintMismatchError
from advknn.core.parallel import chunk_bounds, run_parallel
from advknn.core.reports import write_report_csv
from advknn.models.attack_models import LINF_SLACK, AdversarialRecord, AttackConfig, Predictions
from advknn.models.common_models import AttackKind, Guidance
from advknn.models.dataset_models import Dataset
from advknn.models.network_models import TrainedNetwork
from advknn.models.surrogate_models import SurrogateHead
from advknn.services.dknn import DefenseSuite
from advknn.services.network import LogitsCrossEntropyHead, LossHead, input_gradient
from advknn.services.surrogate import SurrogateLossHead

logger = logging.getLogger(__name__)

RECORDS_KIND = "records"

GradientFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
StepCallback = Callable[[int, np.ndarray], None]


def head_gradient(net: TrainedNetwork, head: LossHead) -> GradientFn:
    """(x, y) -> d loss / d x through the frozen network."""
    def gradient(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return input_gradient(net, head, x, y)
    return gradient


def _check_input(x: np.ndarray, epsilon: float) -> np.ndarray:
    x = np.asarray(x)
    if epsilon < 0 or epsilon > 1:
        raise AttackError(f"epsilon must lie in [0, 1], got {epsilon}")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise AttackError("attack inputs must lie in [0, 1]")
    return x


def fgsm(x: np.ndarray, y, gradient_fn: GradientFn, epsilon: float) -> np.ndarray:
    """clip_[0,1](x + epsilon * sign(grad)), sign(0) = 0."""
    x = _check_input(x, epsilon)
    step = epsilon * np.sign(gradient_fn(x, y)).astype(x.dtype)
    return np.clip(x + step, 0, 1)


def bim(x: np.ndarray, y, gradient_fn: GradientFn, epsilon: float, alpha: float, steps: int,
        callback: Optional[StepCallback] = None) -> np.ndarray:
    """Iterated sign steps of size alpha, each projected into [0, 1] then into the epsilon ball of x."""
    x = _check_input(x, epsilon)
    if not 0 <= alpha <= epsilon:
        raise AttackError(f"alpha ({alpha}) must lie in [0, epsilon={epsilon}]")
    if steps < 1:
        raise AttackError(f"steps must be at least 1, got {steps}")
    lower = x - epsilon
    upper = x + epsilon
    current = x
    for i in range(1, steps + 1):
        step = alpha * np.sign(gradient_fn(current, y)).astype(x.dtype)
        current = np.clip(np.clip(current + step, 0, 1), lower, upper)
        if callback is not None:
            callback(i, current)
    return current


def run_attack(x: np.ndarray, y: np.ndarray, gradient_fn: GradientFn, cfg: AttackConfig,
               callback: Optional[StepCallback] = None) -> np.ndarray:
    if cfg.kind == AttackKind.FGSM:
        return fgsm(x, y, gradient_fn, cfg.epsilon)
    return bim(x, y, gradient_fn, cfg.epsilon, cfg.alpha, cfg.steps, callback=callback)


def _gradient_for(net: TrainedNetwork, cfg: AttackConfig, head: Optional[SurrogateHead]) -> GradientFn:
    if cfg.guidance == Guidance.ORIGIN:
        return head_gradient(net, LogitsCrossEntropyHead())
    if head is None:
        raise AttackError(f"{cfg.guidance.value} guidance needs a surrogate head")
    if head.network_fingerprint != net.fingerprint:
        raise FingerprintMismatchError("surrogate head was trained on a different network")
    if head.layer != cfg.layer:
        raise AttackError(f"surrogate head sits on layer {head.layer}, attack config asks for layer {cfg.layer}")
    if head.use_consistency != (cfg.guidance == Guidance.DKNNB_CL):
        trained = "dknnb-cl" if head.use_consistency else "dknnb"
        raise AttackError(f"{cfg.guidance.value} guidance was given a {trained} head")
    return head_gradient(net, SurrogateLossHead(head))


def _records(suite: DefenseSuite, indices: np.ndarray, labels: np.ndarray, clean: np.ndarray,
             adversarial: np.ndarray, cfg: AttackConfig, workers: int = 1) -> List[AdversarialRecord]:
    before = suite.classify(clean, workers=workers)
    after = suite.classify(adversarial, workers=workers)
    records = []
    for j in range(clean.shape[0]):
        records.append(AdversarialRecord.from_images(
            index=int(indices[j]), label=int(labels[j]), original=clean[j], adversarial=adversarial[j],
            before=Predictions(dnn=int(before.dnn[j]), knn=int(before.knn[j]), dknn=int(before.dknn[j])),
            after=Predictions(dnn=int(after.dnn[j]), knn=int(after.knn[j]), dknn=int(after.dknn[j])),
            credibility_clean=float(before.credibility[j]), credibility=float(after.credibility[j]),
            epsilon=cfg.epsilon, attack_fingerprint=cfg.fingerprint))
    return records


def origin_attack(x: np.ndarray, y, net: TrainedNetwork, cfg: AttackConfig, suite: DefenseSuite,
                  index: int = 0) -> AdversarialRecord:
    """Baseline: the base classifier's own cross-entropy drives the attack."""
    cfg = cfg.model_copy(update={"guidance": Guidance.ORIGIN})
    return _single(x, y, net, cfg, suite, None, index)


def advknn_attack(x: np.ndarray, y, net: TrainedNetwork, head: SurrogateHead, cfg: AttackConfig,
                  suite: DefenseSuite, index: int = 0) -> AdversarialRecord:
    """Attack steered by the surrogate head's cross-entropy against the true label."""
    if cfg.guidance == Guidance.ORIGIN:
        raise AttackError("surrogate attacks need dknnb or dknnb-cl guidance")
    return _single(x, y, net, cfg, suite, head, index)


def _single(x, y, net, cfg, suite, head, index) -> AdversarialRecord:
    x = np.asarray(x)
    batch = x[None] if x.ndim == len(net.config.input_shape) else x
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    adversarial = run_attack(batch, labels, _gradient_for(net, cfg, head), cfg)
    return _records(suite, np.array([index]), labels, batch, adversarial, cfg)[0]


def attack_batch(dataset: Dataset, net: TrainedNetwork, cfg: AttackConfig, suite: DefenseSuite,
                 head: Optional[SurrogateHead] = None, limit: Optional[int] = None,
                 workers: int = 1) -> List[AdversarialRecord]:
    """Attack the first ``limit`` samples (all by default) in fixed-size chunks, merged in input order."""
    gradient_fn = _gradient_for(net, cfg, head)
    n = len(dataset) if limit is None else min(limit, len(dataset))
    images = dataset.images[:n].astype(net.dtype, copy=False)
    labels = dataset.labels[:n]
    logger.info(f"Attacking {n} samples: {cfg.kind.value} eps={cfg.epsilon} guidance={cfg.guidance.value}")

    def run(chunk: slice) -> List[AdversarialRecord]:
        adversarial = run_attack(images[chunk], labels[chunk], gradient_fn, cfg)
        return _records(suite, np.arange(n)[chunk], labels[chunk], images[chunk], adversarial, cfg)

    parts = run_parallel(run, chunk_bounds(n, settings.attack_chunk_size), workers=workers)
    records = [record for part in parts for record in part]
    worst = max((r.linf for r in records), default=0.0)
    if worst > cfg.epsilon + LINF_SLACK:
        raise AttackError(f"emitted perturbation {worst} exceeds epsilon {cfg.epsilon}")
    return records


def records_frame(records: List[AdversarialRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        rows.append({
            "index": r.index, "label": r.label, "l2": r.l2, "linf": r.linf,
            "dnn_before": r.before.dnn, "knn_before": r.before.knn, "dknn_before": r.before.dknn,
            "dnn_after": r.after.dnn, "knn_after": r.after.knn, "dknn_after": r.after.dknn,
            "credibility_clean": r.credibility_clean, "credibility": r.credibility,
        })
    return pd.DataFrame(rows, columns=["index", "label", "l2", "linf", "dnn_before", "knn_before", "dknn_before",
                                       "dnn_after", "knn_after", "dknn_after", "credibility_clean", "credibility"])


def save_records(records: List[AdversarialRecord], path: Path, run_config: Optional[dict] = None,
                 fingerprint: str = "") -> Path:
    """Image container plus a CSV sidecar of norms, predictions and credibility."""
    if not records:
        raise AttackError("no adversarial records to save")
    frame = records_frame(records)
    arrays = {
        "original": np.stack([r.original for r in records]),
        "adversarial": np.stack([r.adversarial for r in records]),
        "index": frame["index"].to_numpy(np.int64),
        "label": frame["label"].to_numpy(np.int64),
        "predictions": frame[["dnn_before", "knn_before", "dknn_before",
                              "dnn_after", "knn_after", "dknn_after"]].to_numpy(np.int64),
        "credibility": frame[["credibility_clean", "credibility"]].to_numpy(np.float64),
    }
    meta = {"epsilon": records[0].epsilon, "attack_fingerprint": records[0].attack_fingerprint}
    path = write_container(path, RECORDS_KIND, arrays, fingerprint=fingerprint, config=run_config, meta=meta)
    write_report_csv(frame, Path(path).with_suffix(".csv"), run_config)
    return path


def load_records(path: Path) -> List[AdversarialRecord]:
    container = read_container(path, kind=RECORDS_KIND)
    preds = container["predictions"]
    cred = container["credibility"]
    records = []
    for j in range(container["index"].shape[0]):
        records.append(AdversarialRecord.from_images(
            index=int(container["index"][j]), label=int(container["label"][j]),
            original=container["original"][j], adversarial=container["adversarial"][j],
            before=Predictions(dnn=int(preds[j, 0]), knn=int(preds[j, 1]), dknn=int(preds[j, 2])),
            after=Predictions(dnn=int(preds[j, 3]), knn=int(preds[j, 4]), dknn=int(preds[j, 5])),
            credibility_clean=float(cred[j, 0]), credibility=float(cred[j, 1]),
            epsilon=container.meta["epsilon"], attack_fingerprint=container.meta["attack_fingerprint"]))
    logger.info(f"Loaded {len(records)} adversarial records from {path}")
    return records
