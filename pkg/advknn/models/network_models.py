import hashlib
from functools import cached_property
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from advknn.models.common_models import Activation, Architecture, LayerKind


class LayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: LayerKind
    units: int = Field(ge=1)
    kernel: int = Field(default=3, ge=1)
    activation: Activation = Activation.RELU
    pool: bool = False

    @model_validator(mode="after")
    def _check_kernel(self) -> "LayerSpec":
        if self.kind == LayerKind.CONV and self.kernel % 2 == 0:
            raise ValueError(f"convolution kernels must be odd, got {self.kernel}")
        if self.kind == LayerKind.DENSE and self.pool:
            raise ValueError("pooling only follows convolution layers")
        return self


class NetworkConfig(BaseModel):
    """Layer stack plus the capture points exposed to the neighbor search.

    Capture point ``l`` (1-based) is the flattened output of layer ``capture_points[l - 1]``.
    """

    model_config = ConfigDict(frozen=True)

    arch: Architecture
    input_shape: Tuple[int, int, int] = (1, 28, 28)
    num_classes: int = Field(default=10, ge=2)
    layers: List[LayerSpec]
    capture_points: List[int]

    @model_validator(mode="after")
    def _check_stack(self) -> "NetworkConfig":
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        last = self.layers[-1]
        if last.kind != LayerKind.DENSE or last.units != self.num_classes or last.activation != Activation.NONE:
            raise ValueError("the last layer must be a dense layer emitting num_classes raw logits")
        seen_dense = False
        for spec in self.layers:
            if spec.kind == LayerKind.DENSE:
                seen_dense = True
            elif seen_dense:
                raise ValueError("convolution layers must precede dense layers")
        points = self.capture_points
        if not points or any(b <= a for a, b in zip(points, points[1:])):
            raise ValueError("capture points must be a non-empty strictly increasing sequence")
        if points[0] < 1 or points[-1] > len(self.layers):
            raise ValueError(f"capture points must lie in [1, {len(self.layers)}]")
        return self

    @property
    def num_capture_points(self) -> int:
        return len(self.capture_points)

    def layer_output_shapes(self) -> List[Tuple[int, ...]]:
        shapes = []
        c, h, w = self.input_shape
        flat: Optional[int] = None
        for spec in self.layers:
            if spec.kind == LayerKind.CONV:
                c = spec.units
                if spec.pool:
                    h, w = h // 2, w // 2
                shapes.append((c, h, w))
            else:
                flat = spec.units
                shapes.append((flat,))
        return shapes

    def feature_width(self, point: int) -> int:
        shape = self.layer_output_shapes()[self.capture_points[point - 1] - 1]
        return int(np.prod(shape))

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        c, h, w = self.input_shape
        width: Optional[int] = None
        for i, spec in enumerate(self.layers, start=1):
            if spec.kind == LayerKind.CONV:
                shapes[f"layer{i}.weight"] = (spec.units, c, spec.kernel, spec.kernel)
                c = spec.units
                if spec.pool:
                    h, w = h // 2, w // 2
            else:
                if width is None:
                    width = c * h * w
                shapes[f"layer{i}.weight"] = (width, spec.units)
                width = spec.units
            shapes[f"layer{i}.bias"] = (spec.units,)
        return shapes


class OptimizerSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    epochs: int = Field(default=10, ge=0)
    batch_size: int = Field(default=64, ge=1)
    seed: int = Field(default=0, ge=0)


class TrainingMetadata(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int
    epochs: int
    batch_size: int
    learning_rate: float
    momentum: float
    final_loss: Optional[float] = None
    train_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None


class TrainedNetwork(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    config: NetworkConfig
    parameters: Dict[str, np.ndarray]
    metadata: TrainingMetadata

    @field_validator("parameters", mode="before")
    @classmethod
    def _freeze_parameters(cls, value: Any) -> Dict[str, np.ndarray]:
        frozen = {}
        for name, array in dict(value).items():
            array = np.array(array, copy=True)
            if array.dtype not in (np.float32, np.float64):
                raise ValueError(f"parameter {name} must be float32 or float64")
            array.setflags(write=False)
            frozen[name] = array
        return frozen

    @model_validator(mode="after")
    def _check_shapes(self) -> "TrainedNetwork":
        expected = self.config.parameter_shapes()
        if set(expected) != set(self.parameters):
            raise ValueError(f"parameter names {sorted(self.parameters)} do not match config {sorted(expected)}")
        for name, shape in expected.items():
            if tuple(self.parameters[name].shape) != shape:
                raise ValueError(f"{name} has shape {list(self.parameters[name].shape)}, config needs {list(shape)}")
        return self

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.parameters.values())).dtype

    @cached_property
    def fingerprint(self) -> str:
        digest = hashlib.sha256(self.config.model_dump_json().encode("utf-8"))
        for name in sorted(self.parameters):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.parameters[name]).tobytes())
        return digest.hexdigest()[:16]
