"""
Exact k-nearest-neighbor search over layer activations.

The fast path shortlists candidates with the expanded form
||q||^2 - 2 q.g + ||g||^2 (one matrix product per query block), widens the
shortlist by a bound on that expansion's rounding error, then ranks the
shortlist with the same direct sum of squared differences the brute-force
oracle uses. Ranking is by (distance, database row), so results are exact and
identical to :func:`brute_force_neighbors`.
"""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from sklearn.preprocessing import normalize

from advknn.config import settings
from advknn.core.container import read_container, write_container
from advknn.core.exceptions import DimensionError, NeighborRangeError
from advknn.core.parallel import map_chunks
from advknn.models.common_models import DistanceMetric
from advknn.models.dataset_models import Dataset
from advknn.models.neighbor_models import FeatureDatabase, NeighborDistribution
from advknn.models.network_models import TrainedNetwork
from advknn.services.network import extract_features

logger = logging.getLogger(__name__)

DATABASE_KIND = "databases"
_EPS = np.finfo(np.float64).eps

Excludes = Optional[Union[int, Sequence[int], np.ndarray]]


def sample_indices(n: int, size: Optional[int], seed: int = 0) -> Optional[np.ndarray]:
    """Sorted seeded subset of range(n), or None for the whole set."""
    if size is None or size >= n:
        return None
    rng = np.random.default_rng([seed, 2])
    return np.sort(rng.choice(n, size=size, replace=False))


def build_database(net: TrainedNetwork, train: Dataset, layer: int,
                   metric: DistanceMetric = DistanceMetric.EUCLIDEAN,
                   indices: Optional[np.ndarray] = None, workers: int = 1) -> FeatureDatabase:
    """Row i holds the flattened capture-point activation of training sample ``indices[i]``."""
    rows = np.arange(len(train)) if indices is None else np.asarray(indices, dtype=np.int64)
    images = train.images if indices is None else train.images[rows]
    features = extract_features(net, images, layer, workers=workers)
    db = FeatureDatabase(features=features, labels=train.labels[rows], layer=layer,
                         network_fingerprint=net.fingerprint, num_classes=train.num_classes,
                         metric=DistanceMetric(metric), sample_indices=rows)
    logger.info(f"Built layer {layer} database: {db.size} rows x {db.width} features")
    return db


def _queries(db: FeatureDatabase, queries: np.ndarray) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.ndim != 2 or q.shape[1] != db.width:
        raise DimensionError("knn_query", f"query width {q.shape[-1]} does not match database width {db.width}")
    if db.metric == DistanceMetric.COSINE:
        q = normalize(q, norm="l2")
    return q


def _excludes(exclude: Excludes, n: int) -> np.ndarray:
    if exclude is None:
        return np.full(n, -1, dtype=np.int64)
    out = np.asarray(exclude, dtype=np.int64).reshape(-1)
    if out.size == 1 and n != 1:
        out = np.full(n, out[0], dtype=np.int64)
    if out.size != n:
        raise DimensionError("knn_query", f"{out.size} exclusions for {n} queries")
    return out


def _check_k(db: FeatureDatabase, k: int, excluding: bool) -> None:
    available = db.size - (1 if excluding else 0)
    if not 1 <= k <= available:
        raise NeighborRangeError(f"k={k} outside [1, {available}] for a database of {db.size} rows")


def exact_squared_distances(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = rows - q
    return np.sum(diff * diff, axis=1)


def _rank(candidates: np.ndarray, distances: np.ndarray, k: int) -> np.ndarray:
    order = np.lexsort((candidates, distances))
    return candidates[order[:k]]


def _search_block(db: FeatureDatabase, q: np.ndarray, k: int, exclude: np.ndarray) -> np.ndarray:
    g = db.search_features
    g2 = db.squared_norms
    q2 = np.einsum("ij,ij->i", q, q)
    approx = q2[:, None] - 2.0 * (q @ g.T) + g2[None, :]
    # bound on |approx - direct| covering both evaluation orders
    tol = 8.0 * (db.width + 2) * _EPS * (q2 + g2.max())
    out = np.empty((q.shape[0], k), dtype=np.int64)
    for row in range(q.shape[0]):
        scores = approx[row]
        if exclude[row] >= 0:
            scores[exclude[row]] = np.inf
        kth = np.partition(scores, k - 1)[k - 1]
        candidates = np.flatnonzero(scores <= kth + 2.0 * tol[row])
        if exclude[row] >= 0:
            candidates = candidates[candidates != exclude[row]]
        out[row] = _rank(candidates, exact_squared_distances(g[candidates], q[row]), k)
    return out


def knn_query_batch(db: FeatureDatabase, queries: np.ndarray, k: int, exclude: Excludes = None,
                    workers: int = 1) -> np.ndarray:
    """[n, k] neighbor rows, ascending by distance then by row index."""
    q = _queries(db, queries)
    excl = _excludes(exclude, q.shape[0])
    _check_k(db, k, bool(np.any(excl >= 0)))
    if q.shape[0] == 0:
        return np.zeros((0, k), dtype=np.int64)
    return map_chunks(lambda chunk: _search_block(db, q[chunk], k, excl[chunk]), q.shape[0],
                      settings.knn_block_size, workers=workers)


def knn_query(db: FeatureDatabase, q: np.ndarray, k: int, exclude: Optional[int] = None) -> np.ndarray:
    return knn_query_batch(db, np.asarray(q).reshape(1, -1), k, exclude=exclude)[0]


def brute_force_neighbors(db: FeatureDatabase, q: np.ndarray, k: int, exclude: Optional[int] = None) -> np.ndarray:
    """Naive all-rows oracle: every distance evaluated directly, then a full sort."""
    query = _queries(db, q)[0]
    _check_k(db, k, exclude is not None)
    rows = np.arange(db.size)
    distances = exact_squared_distances(db.search_features, query)
    if exclude is not None:
        keep = rows != exclude
        rows, distances = rows[keep], distances[keep]
    return _rank(rows, distances, k)


def neighbor_distances(db: FeatureDatabase, q: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Squared distances from ``q`` to the given rows, in the database's search space."""
    return exact_squared_distances(db.search_features[np.asarray(rows)], _queries(db, q)[0])


def vote_counts(db: FeatureDatabase, neighbors: np.ndarray) -> np.ndarray:
    """[n, C] label histogram of each neighbor row set."""
    labels = db.labels[np.atleast_2d(neighbors)]
    return (labels[:, :, None] == np.arange(db.num_classes)).sum(axis=1).astype(np.int64)


def vote_counts_batch(db: FeatureDatabase, queries: np.ndarray, k: int, exclude: Excludes = None,
                      workers: int = 1) -> np.ndarray:
    return vote_counts(db, knn_query_batch(db, queries, k, exclude=exclude, workers=workers))


def vote_distribution(db: FeatureDatabase, q: np.ndarray, k: int, exclude: Optional[int] = None) -> NeighborDistribution:
    neighbors = knn_query(db, q, k, exclude=exclude)
    return NeighborDistribution(counts=vote_counts(db, neighbors)[0], k=k, indices=neighbors)


def knn_predict_batch(db: FeatureDatabase, queries: np.ndarray, k: int, exclude: Excludes = None,
                      workers: int = 1) -> np.ndarray:
    """Majority label per query; ties go to the lowest class index."""
    return np.argmax(vote_counts_batch(db, queries, k, exclude=exclude, workers=workers), axis=1).astype(np.int64)


def knn_predict(db: FeatureDatabase, q: np.ndarray, k: int, exclude: Optional[int] = None) -> int:
    return vote_distribution(db, q, k, exclude=exclude).label


def database_row_of(db: FeatureDatabase, sample_index: int) -> Optional[int]:
    """Database row holding training sample ``sample_index``, if it was sampled."""
    pos = int(np.searchsorted(db.sample_indices, sample_index))
    if pos < db.size and db.sample_indices[pos] == sample_index:
        return pos
    return None


def save_databases(databases: List[FeatureDatabase], path: Path, run_config: Optional[dict] = None,
                   fingerprint: str = "") -> Path:
    arrays = {}
    for db in databases:
        arrays[f"layer{db.layer}.features"] = db.features
        arrays[f"layer{db.layer}.labels"] = db.labels.astype(np.int32)
        arrays[f"layer{db.layer}.sample_indices"] = db.sample_indices.astype(np.int32)
    first = databases[0]
    meta = {
        "layers": [db.layer for db in databases],
        "network_fingerprint": first.network_fingerprint,
        "num_classes": first.num_classes,
        "metric": first.metric.value,
    }
    return write_container(path, DATABASE_KIND, arrays, fingerprint=fingerprint, config=run_config, meta=meta)


def load_databases(path: Path) -> List[FeatureDatabase]:
    container = read_container(path, kind=DATABASE_KIND)
    meta = container.meta
    databases = [
        FeatureDatabase(features=container[f"layer{layer}.features"], labels=container[f"layer{layer}.labels"],
                        sample_indices=container[f"layer{layer}.sample_indices"], layer=layer,
                        network_fingerprint=meta["network_fingerprint"], num_classes=meta["num_classes"],
                        metric=DistanceMetric(meta["metric"]))
        for layer in meta["layers"]
    ]
    logger.info(f"Loaded {len(databases)} layer databases from {path}")
    return databases
