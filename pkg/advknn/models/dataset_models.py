from typing import Any, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


class Dataset(BaseModel):
    """Images [n, 1, H, W] in [0, 1] with integer labels in [0, num_classes)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = Field(default=10, ge=2)
    name: str = "dataset"

    @field_validator("images", mode="before")
    @classmethod
    def _check_images(cls, value: Any) -> np.ndarray:
        array = np.asarray(value)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float32)
        if array.ndim != 4 or array.shape[1] != 1:
            raise ValueError(f"images must have shape [n, 1, H, W], got {list(array.shape)}")
        if array.size and (not np.all(np.isfinite(array)) or array.min() < 0 or array.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        return _frozen(array)

    @field_validator("labels", mode="before")
    @classmethod
    def _check_labels(cls, value: Any) -> np.ndarray:
        array = np.asarray(value)
        if array.ndim != 1 or (array.size and not np.issubdtype(array.dtype, np.integer)):
            raise ValueError("labels must be a 1-D integer vector")
        return _frozen(array.astype(np.int64))

    @model_validator(mode="after")
    def _check_pairing(self) -> "Dataset":
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        return self

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices: Sequence[int], name: str = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(images=self.images[indices], labels=self.labels[indices],
                       num_classes=self.num_classes, name=name or self.name)


class SplitSet(BaseModel):
    """Train split plus the test split with its calibration samples held out.

    ``test_indices`` and ``calibration_indices`` index the original test split.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    train: Dataset
    test: Dataset
    calibration: Dataset
    test_indices: np.ndarray
    calibration_indices: np.ndarray

    @field_validator("test_indices", "calibration_indices", mode="before")
    @classmethod
    def _as_index(cls, value: Any) -> np.ndarray:
        return _frozen(np.asarray(value, dtype=np.int64).reshape(-1))

    @model_validator(mode="after")
    def _check_disjoint(self) -> "SplitSet":
        if np.intersect1d(self.test_indices, self.calibration_indices).size:
            raise ValueError("calibration samples must be held out of the test split")
        if len(self.test_indices) != len(self.test) or len(self.calibration_indices) != len(self.calibration):
            raise ValueError("index vectors do not match split sizes")
        return self
