import hashlib
from functools import cached_property
from typing import Any, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from sklearn.preprocessing import normalize

from advknn.models.common_models import DistanceMetric
from advknn.models.network_models import TrainedNetwork


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


class FeatureDatabase(BaseModel):
    """Layer activations of the reference set, one row per sample."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    features: np.ndarray
    labels: np.ndarray
    layer: int = Field(ge=1)
    network_fingerprint: str
    num_classes: int = Field(ge=2)
    metric: DistanceMetric = DistanceMetric.EUCLIDEAN
    sample_indices: Optional[np.ndarray] = None

    @field_validator("features", mode="before")
    @classmethod
    def _check_features(cls, value: Any) -> np.ndarray:
        array = np.asarray(value)
        if array.ndim != 2 or array.shape[0] == 0:
            raise ValueError(f"features must be a non-empty [M, d] matrix, got shape {list(array.shape)}")
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float64)
        if not np.all(np.isfinite(array)):
            raise ValueError("feature rows must be finite")
        return _frozen(array)

    @field_validator("labels", "sample_indices", mode="before")
    @classmethod
    def _as_int(cls, value: Any) -> Optional[np.ndarray]:
        if value is None:
            return None
        return _frozen(np.asarray(value).astype(np.int64).reshape(-1))

    @model_validator(mode="after")
    def _check_rows(self) -> "FeatureDatabase":
        m = self.features.shape[0]
        if self.labels.shape[0] != m:
            raise ValueError(f"{m} feature rows but {self.labels.shape[0]} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.sample_indices is None:
            object.__setattr__(self, "sample_indices", _frozen(np.arange(m, dtype=np.int64)))
        elif self.sample_indices.shape[0] != m:
            raise ValueError("sample_indices must have one entry per row")
        return self

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @property
    def width(self) -> int:
        return int(self.features.shape[1])

    @cached_property
    def search_features(self) -> np.ndarray:
        """float64 rows the distance is computed on (unit rows under the cosine metric)."""
        rows = self.features.astype(np.float64)
        if self.metric == DistanceMetric.COSINE:
            rows = normalize(rows, norm="l2")
        rows.setflags(write=False)
        return rows

    @cached_property
    def squared_norms(self) -> np.ndarray:
        norms = np.einsum("ij,ij->i", self.search_features, self.search_features)
        norms.setflags(write=False)
        return norms

    @cached_property
    def fingerprint(self) -> str:
        digest = hashlib.sha256(f"{self.network_fingerprint}:{self.layer}:{self.metric.value}".encode("utf-8"))
        digest.update(np.ascontiguousarray(self.features).tobytes())
        digest.update(self.labels.tobytes())
        return digest.hexdigest()[:16]


class NeighborDistribution(BaseModel):
    """Vote fractions of the k nearest neighbors; ``probs == counts / k``."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    counts: np.ndarray
    k: int = Field(ge=1)
    indices: np.ndarray

    @field_validator("counts", "indices", mode="before")
    @classmethod
    def _as_int(cls, value: Any) -> np.ndarray:
        return _frozen(np.asarray(value).astype(np.int64).reshape(-1))

    @model_validator(mode="after")
    def _check_votes(self) -> "NeighborDistribution":
        if int(self.counts.sum()) != self.k or self.indices.shape[0] != self.k:
            raise ValueError("vote counts and neighbor indices must both total k")
        return self

    @property
    def probs(self) -> np.ndarray:
        return self.counts / self.k

    @property
    def label(self) -> int:
        return int(np.argmax(self.counts))


class CalibrationTable(BaseModel):
    """True-class summed DkNN scores of the calibration samples."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    scores: np.ndarray
    num_layers: int = Field(ge=1)
    k: int = Field(ge=1)
    network_fingerprint: str = ""

    @field_validator("scores", mode="before")
    @classmethod
    def _check_scores(cls, value: Any) -> np.ndarray:
        array = np.asarray(value, dtype=np.float64).reshape(-1)
        if array.size == 0:
            raise ValueError("a calibration table needs at least one score")
        return _frozen(array)

    @model_validator(mode="after")
    def _check_range(self) -> "CalibrationTable":
        if self.scores.min() < 0 or self.scores.max() > self.num_layers:
            raise ValueError(f"scores must lie in [0, {self.num_layers}]")
        return self

    @property
    def size(self) -> int:
        return int(self.scores.shape[0])

    @cached_property
    def sorted_scores(self) -> np.ndarray:
        ordered = np.sort(self.scores)
        ordered.setflags(write=False)
        return ordered


class DknnModel(BaseModel):
    """A network plus one feature database per ensemble layer."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    network: TrainedNetwork
    databases: List[FeatureDatabase]
    k: int = Field(ge=1)

    @model_validator(mode="after")
    def _check_layers(self) -> "DknnModel":
        if not self.databases:
            raise ValueError("a DkNN model needs at least one layer database")
        layers = [db.layer for db in self.databases]
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ValueError("layer databases must be ordered by strictly increasing layer")
        return self

    @property
    def num_layers(self) -> int:
        return len(self.databases)

    @property
    def layers(self) -> List[int]:
        return [db.layer for db in self.databases]

    @property
    def num_classes(self) -> int:
        return self.network.config.num_classes

    def database(self, layer: int) -> FeatureDatabase:
        for db in self.databases:
            if db.layer == layer:
                return db
        raise KeyError(layer)
