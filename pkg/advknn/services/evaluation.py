import logging
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image
from sklearn.metrics import accuracy_score

from advknn.core.exceptions import (ConsistencyError, ContractError, ExportError, InvalidGridError,
                                    NeighborRangeError, ShapeMismatchError)
from advknn.core.reports import read_report_csv, write_report_csv
from advknn.models.attack_models import AdversarialRecord, Predictions
from advknn.models.common_models import SweepAxis
from advknn.models.dataset_models import Dataset
from advknn.models.metrics_models import (CLASSIFIERS, ClassifierMetrics, DetectionCurve, DetectionPoint,
                                          MetricsReport)
from advknn.models.neighbor_models import DknnModel
from advknn.models.run_models import RunConfig
from advknn.models.surrogate_models import SurrogateHead
from advknn.services.dknn import DefenseSuite
from advknn.services.network import extract_features, forward_with_activations
from advknn.services.neighbors import knn_query, neighbor_distances
from advknn.services.surrogate import head_probabilities

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 10
DEFAULT_THRESHOLDS = tuple(np.round(np.linspace(0.0, 1.0, 21), 2)) + (1.01,)

# (path, writer) -> path; ArtifactStore.write_once has this shape
Emitter = Callable[[Path, Callable[[Path], None]], Path]


def _emit(path: Path, writer: Callable[[Path], None]) -> Path:
    writer(path)
    return path


def _metrics(records: Sequence[AdversarialRecord], which: str) -> Dict[str, ClassifierMetrics]:
    out = {}
    for name in CLASSIFIERS:
        correct = sum(int(getattr(getattr(r, which), name) == r.label) for r in records)
        out[name] = ClassifierMetrics(correct=correct, total=len(records))
    return out


def evaluate_batch(records: Sequence[AdversarialRecord], config: Optional[Dict[str, Any]] = None) -> MetricsReport:
    """Accuracies, distortion and credibility over one attacked sample set."""
    if not records:
        raise ContractError("evaluate_batch needs at least one record")
    fingerprints = {r.attack_fingerprint for r in records}
    epsilons = {r.epsilon for r in records}
    if len(fingerprints) > 1 or len(epsilons) > 1:
        raise ConsistencyError(f"records come from {len(fingerprints)} attack configurations "
                               f"(epsilons {sorted(epsilons)})")

    l2 = np.array([r.l2 for r in records])
    was_correct = np.array([r.before.dknn == r.label for r in records])
    fooled = np.array([r.after.dknn != r.label for r in records])
    adv_cred = np.array([r.credibility for r in records])
    clean_cred = np.array([r.credibility_clean for r in records])
    histogram, _ = np.histogram(adv_cred, bins=HISTOGRAM_BINS, range=(0.0, 1.0))

    successful = was_correct & fooled
    return MetricsReport(
        samples=len(records),
        adversarial=_metrics(records, "after"),
        clean=_metrics(records, "before"),
        mean_l2=float(l2[was_correct].mean()) if was_correct.any() else 0.0,
        mean_l2_successful=float(l2[successful].mean()) if successful.any() else None,
        mean_linf=float(np.mean([r.linf for r in records])),
        mean_credibility=float(adv_cred.mean()),
        mean_clean_credibility=float(clean_cred.mean()),
        credibility_histogram=histogram.astype(int).tolist(),
        config=dict(config or {}),
        attack_fingerprint=next(iter(fingerprints)),
    )


def detection_tradeoff(clean: Sequence[float], adversarial: Sequence[float],
                       thresholds: Iterable[float] = DEFAULT_THRESHOLDS) -> DetectionCurve:
    """Flag an input as adversarial when its credibility is strictly below the threshold."""
    clean = np.asarray(clean, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64)
    if clean.size == 0 or adversarial.size == 0:
        raise ContractError("detection tradeoff needs clean and adversarial credibilities")
    points = [DetectionPoint(threshold=float(t), detected=float(np.mean(adversarial < t)),
                             rejected=float(np.mean(clean < t)))
              for t in thresholds]
    return DetectionCurve(points=points)


def detection_frame(curve: DetectionCurve) -> pd.DataFrame:
    return pd.DataFrame([p.model_dump() for p in curve.points], columns=["threshold", "detected", "rejected"])


def _grid_config(axis: SweepAxis, value: float, config: RunConfig, num_layers: int) -> RunConfig:
    updates: Dict[str, Any] = {}
    if axis == SweepAxis.EPSILON:
        if not 0 <= value <= 1:
            raise InvalidGridError(f"epsilon grid value {value} outside [0, 1]")
        updates = {"epsilon": float(value), "alpha": min(config.alpha, float(value))}
    else:
        if float(value) != int(value) or int(value) < 1:
            raise InvalidGridError(f"{axis.value} grid value {value} must be a positive integer")
        if axis == SweepAxis.LAYER and int(value) > num_layers:
            raise InvalidGridError(f"layer {int(value)} does not exist (network has {num_layers} capture points)")
        updates = {axis.value: int(value)}
    return RunConfig.model_validate({**config.model_dump(by_alias=True), **updates})


def sweep(axis: SweepAxis, grid: Sequence[float], config: RunConfig, runner) -> List[MetricsReport]:
    """One full attack + evaluation per grid point with everything else held fixed.

    ``runner`` is an ExperimentRunner; missing per-point artifacts are built through it.
    """
    axis = SweepAxis(axis)
    if not grid:
        raise InvalidGridError("sweep grid is empty")
    num_layers = runner.network_config(config).num_capture_points
    configs = [_grid_config(axis, value, config, num_layers) for value in grid]
    reports = []
    for value, point in zip(grid, configs):
        logger.info(f"Sweep {axis.value}={value}")
        reports.append(runner.evaluate(point))
    return reports


def sweep_frame(axis: SweepAxis, grid: Sequence[float], reports: Sequence[MetricsReport]) -> pd.DataFrame:
    rows = []
    for value, report in zip(grid, reports):
        row = {"axis": SweepAxis(axis).value, "value": value}
        row.update(report.to_row())
        rows.append(row)
    return pd.DataFrame(rows)


def transfer_eval(records: Sequence[AdversarialRecord], target: DefenseSuite, workers: int = 1,
                  config: Optional[Dict[str, Any]] = None) -> MetricsReport:
    """Re-classify stored clean and adversarial images with an independently trained target."""
    if not records:
        raise ContractError("transfer evaluation needs at least one record")
    expected = tuple(target.network.config.input_shape)
    if tuple(records[0].adversarial.shape) != expected:
        raise ShapeMismatchError(f"records hold images of shape {list(records[0].adversarial.shape)}, "
                                 f"target expects {list(expected)}")
    dtype = target.network.dtype
    clean = np.stack([r.original for r in records]).astype(dtype)
    adversarial = np.stack([r.adversarial for r in records]).astype(dtype)
    before = target.classify(clean, workers=workers)
    after = target.classify(adversarial, workers=workers)
    retargeted = [
        r.model_copy(update={
            "before": Predictions(dnn=int(before.dnn[j]), knn=int(before.knn[j]), dknn=int(before.dknn[j])),
            "after": Predictions(dnn=int(after.dnn[j]), knn=int(after.knn[j]), dknn=int(after.dknn[j])),
            "credibility_clean": float(before.credibility[j]),
            "credibility": float(after.credibility[j]),
        })
        for j, r in enumerate(records)
    ]
    return evaluate_batch(retargeted, config=config)


def _to_pgm(images: np.ndarray, path: Path) -> Path:
    pixels = np.rint(np.clip(np.asarray(images, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    try:
        Image.fromarray(pixels).save(path, format="PPM")
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        raise ExportError(f"cannot write {path}: {e}") from e
    return path


def _strip(images: np.ndarray) -> np.ndarray:
    # [n, 1, H, W] -> [H, n * W]
    return np.concatenate([img[0] for img in images], axis=1)


def export_neighbor_panel(model: DknnModel, train: Dataset, x: np.ndarray, k_show: int, out_dir: Path,
                          tag: str = "clean", run_config: Optional[Dict[str, Any]] = None,
                          emit: Emitter = _emit) -> List[Path]:
    """Per ensemble layer, a PGM strip of the ``k_show`` nearest training images plus one index CSV.

    Every file goes through ``emit``; pass ``ArtifactStore.write_once`` to leave existing files untouched.
    """
    if not 1 <= k_show <= model.k:
        raise NeighborRangeError(f"k_show={k_show} outside [1, {model.k}]")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ExportError(f"cannot create {out_dir}: {e}") from e
    x = np.asarray(x)
    batch = x[None] if x.ndim == 3 else x[:1]
    activations = forward_with_activations(model.network, batch).activations

    written = []
    rows = []
    for db in model.databases:
        query = activations[db.layer][0]
        neighbors = knn_query(db, query, model.k)[:k_show]
        distances = neighbor_distances(db, query, neighbors)
        train_rows = db.sample_indices[neighbors]
        strip = _strip(train.images[train_rows])
        written.append(emit(out_dir / f"panel-{tag}-layer{db.layer}.pgm", lambda p, strip=strip: _to_pgm(strip, p)))
        for rank, (row, sample, dist) in enumerate(zip(neighbors, train_rows, distances), start=1):
            rows.append({"layer": db.layer, "rank": rank, "database_row": int(row), "train_index": int(sample),
                         "label": int(db.labels[row]), "squared_distance": float(dist)})
    frame = pd.DataFrame(rows)
    written.append(emit(out_dir / f"panel-{tag}.csv", lambda p: write_report_csv(frame, p, run_config)))
    return written


def export_record_gallery(records: Sequence[AdversarialRecord], path: Path, count: int = 10,
                          emit: Emitter = _emit) -> Path:
    """Two-row PGM: originals on top, their adversaries underneath."""
    chosen = list(records)[:count]
    if not chosen:
        raise ContractError("no records to draw")
    top = _strip(np.stack([r.original for r in chosen]))
    bottom = _strip(np.stack([r.adversarial for r in chosen]))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return emit(Path(path), lambda p: _to_pgm(np.concatenate([top, bottom], axis=0), p))


def clean_accuracy_row(suite: DefenseSuite, test: Dataset, head: Optional[SurrogateHead] = None,
                       workers: int = 1) -> Dict[str, Optional[float]]:
    """Clean accuracy of DNN, kNN, DkNN and (if a head is given) the surrogate head."""
    if len(test) == 0:
        raise ContractError("clean accuracy needs a non-empty test set")
    output = suite.classify(test.images, workers=workers)
    row: Dict[str, Optional[float]] = {
        "dnn": accuracy_score(test.labels, output.dnn),
        "knn": accuracy_score(test.labels, output.knn),
        "dknn": accuracy_score(test.labels, output.dknn),
        "dknnb": None,
    }
    if head is not None:
        features = extract_features(suite.network, test.images, head.layer, workers=workers)
        row["dknnb"] = accuracy_score(test.labels, np.argmax(head_probabilities(head, features), axis=1))
    return {key: (float(value) if value is not None else None) for key, value in row.items()}


def attack_table(reports: Mapping[Tuple[str, str], MetricsReport]) -> pd.DataFrame:
    """Rows of classifier x guidance x attack with accuracy, distortion and credibility."""
    rows = []
    for (guidance, attack), report in sorted(reports.items()):
        for name in ("knn", "dknn"):
            rows.append({"classifier": name, "guidance": guidance, "attack": attack,
                         "accuracy": report.accuracy(name), "success_rate": report.success_rate(name),
                         "mean_l2": report.mean_l2, "mean_credibility": report.mean_credibility})
    return pd.DataFrame(rows, columns=["classifier", "guidance", "attack", "accuracy", "success_rate", "mean_l2",
                                       "mean_credibility"])


def collate_tables(out_dir: Path) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Gather emitted clean-accuracy and metrics CSVs into the two summary tables."""
    out_dir = Path(out_dir)
    clean_rows = []
    for path in sorted(out_dir.glob("clean-*.csv")):
        frame, config = read_report_csv(path)
        for row in frame.to_dict("records"):
            clean_rows.append({"dataset": config.get("dataset"), "arch": config.get("arch"), **row})
    attack_rows = []
    for path in sorted(out_dir.glob("metrics-*.csv")):
        frame, config = read_report_csv(path)
        for row in frame.to_dict("records"):
            for name in ("knn", "dknn"):
                attack_rows.append({
                    "dataset": config.get("dataset"), "classifier": name, "guidance": config.get("guidance"),
                    "attack": config.get("attack"), "epsilon": config.get("epsilon"),
                    "accuracy": row[f"{name}_accuracy"], "mean_l2": row["mean_l2"],
                    "mean_credibility": row["mean_credibility"],
                })
    table1 = pd.DataFrame(clean_rows)
    table2 = pd.DataFrame(attack_rows)
    if not table2.empty:
        table2 = table2.sort_values(["dataset", "classifier", "attack", "guidance", "epsilon"], kind="stable")
    return table1, table2
