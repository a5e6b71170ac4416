from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from advknn.models.common_models import DistanceMetric


class SurrogateHead(BaseModel):
    """One affine map plus softmax standing in for a layer's kNN vote distribution."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weight: np.ndarray
    bias: np.ndarray
    layer: int = Field(ge=1)
    database_fingerprint: str
    network_fingerprint: str
    use_consistency: bool = True
    lambda_weight: float = Field(default=0.3, ge=0)
    metric: DistanceMetric = DistanceMetric.EUCLIDEAN

    @field_validator("weight", "bias", mode="before")
    @classmethod
    def _freeze(cls, value: Any) -> np.ndarray:
        array = np.array(value, copy=True)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float64)
        array.setflags(write=False)
        return array

    @model_validator(mode="after")
    def _check_shapes(self) -> "SurrogateHead":
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(f"head needs weight [d, C] and bias [C], got {list(self.weight.shape)} "
                             f"and {list(self.bias.shape)}")
        return self

    @property
    def width(self) -> int:
        return int(self.weight.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.weight.shape[1])


class SurrogateTrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lambda_weight: float = Field(default=0.3, ge=0, alias="lambda")
    epochs: int = Field(default=5, ge=0)
    batch_size: int = Field(default=128, ge=1)
    learning_rate: float = Field(default=0.1, gt=0)
    seed: int = Field(default=0, ge=0)
    k: int = Field(default=75, ge=1)
    use_consistency: bool = True

    @model_validator(mode="after")
    def _check_objective(self) -> "SurrogateTrainConfig":
        if not self.use_consistency and self.lambda_weight == 0:
            raise ValueError("a head trained without the consistency term needs lambda > 0")
        return self


class SurrogateReport(BaseModel):
    agreement: float = Field(ge=0, le=1)
    accuracy: float = Field(ge=0, le=1)
    samples: int = Field(ge=0)
