import hashlib
import json
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from advknn.models.common_models import Architecture, AttackKind, DistanceMetric, Guidance, SweepAxis

# Standard IDX file names shared by MNIST and FashionMNIST
TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"

_DATA_FIELDS = ["dataset", "data_dir", "num_classes", "train_images", "train_labels", "test_images", "test_labels",
                "calibration_per_class", "seed"]
_CHECKPOINT_FIELDS = _DATA_FIELDS + ["arch", "epochs", "batch_size", "learning_rate", "momentum"]
_DATABASE_FIELDS = _CHECKPOINT_FIELDS + ["metric", "database_size"]
_CALIBRATION_FIELDS = _DATABASE_FIELDS + ["k", "dknn_layers"]
_SURROGATE_FIELDS = _DATABASE_FIELDS + ["k", "layer", "guidance", "lambda_weight", "surrogate_epochs",
                                        "surrogate_batch_size", "surrogate_learning_rate"]
_CLEAN_FIELDS = _CALIBRATION_FIELDS + [f for f in _SURROGATE_FIELDS if f not in _CALIBRATION_FIELDS]
_RECORD_FIELDS = _CLEAN_FIELDS + ["attack", "epsilon", "alpha", "steps", "attack_limit"]

STAGE_FIELDS: Dict[str, List[str]] = {
    "data": _DATA_FIELDS,
    "checkpoint": _CHECKPOINT_FIELDS,
    "databases": _DATABASE_FIELDS,
    "calibration": _CALIBRATION_FIELDS,
    "surrogate": _SURROGATE_FIELDS,
    "clean": _CLEAN_FIELDS,
    "records": _RECORD_FIELDS,
}


class RunConfig(BaseModel):
    """Everything one experiment run depends on. Defaults follow the published setup."""

    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid", use_enum_values=False)

    # Data
    dataset: str = "mnist"
    data_dir: Path = Path("data/mnist")
    train_images: Optional[Path] = None
    train_labels: Optional[Path] = None
    test_images: Optional[Path] = None
    test_labels: Optional[Path] = None
    num_classes: int = Field(default=10, ge=2)
    calibration_per_class: int = Field(default=75, ge=0)
    seed: int = Field(default=0, ge=0)

    # Base network
    arch: Architecture = Architecture.BASE
    transfer_arch: Architecture = Architecture.LENET5
    epochs: int = Field(default=10, ge=0)
    batch_size: int = Field(default=64, ge=1)
    learning_rate: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)

    # Neighbors
    k: int = Field(default=75, ge=1)
    layer: int = Field(default=3, ge=1)
    dknn_layers: Optional[List[int]] = None
    metric: DistanceMetric = DistanceMetric.EUCLIDEAN
    database_size: Optional[int] = Field(default=None, ge=1)

    # Surrogate head
    lambda_weight: float = Field(default=0.3, ge=0, alias="lambda")
    surrogate_epochs: int = Field(default=5, ge=0)
    surrogate_batch_size: int = Field(default=128, ge=1)
    surrogate_learning_rate: float = Field(default=0.1, gt=0)

    # Attack
    attack: AttackKind = AttackKind.BIM
    guidance: Guidance = Guidance.DKNNB_CL
    epsilon: float = Field(default=0.25, ge=0, le=1)
    alpha: float = Field(default=0.01, ge=0)
    steps: int = Field(default=100, ge=1)
    attack_limit: Optional[int] = Field(default=None, ge=1)

    # Evaluation extras
    sweep_axis: SweepAxis = SweepAxis.EPSILON
    sweep_grid: Optional[List[float]] = None
    panel_index: int = Field(default=0, ge=0)
    panel_k_show: int = Field(default=5, ge=1)

    # Execution
    workers: int = Field(default=1, ge=1)
    out: Path = Path("runs")

    @field_validator("dknn_layers", "sweep_grid", mode="before")
    @classmethod
    def _split_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            parts = [p.strip() for p in value.split(",") if p.strip()]
            return parts or None
        return value

    @field_validator("attack_limit", "database_size", mode="before")
    @classmethod
    def _none_literal(cls, value: Any) -> Any:
        if isinstance(value, str) and value.strip().lower() in ("", "none", "all"):
            return None
        return value

    @model_validator(mode="after")
    def _check_attack_budget(self) -> "RunConfig":
        if self.alpha > self.epsilon:
            raise ValueError(f"alpha ({self.alpha}) must not exceed epsilon ({self.epsilon})")
        if self.dknn_layers is not None:
            if sorted(set(self.dknn_layers)) != list(self.dknn_layers) or self.dknn_layers[0] < 1:
                raise ValueError("dknn_layers must be strictly increasing positive layer numbers")
        return self

    @classmethod
    def accepted_keys(cls) -> FrozenSet[str]:
        keys = set(cls.model_fields)
        keys.update(f.alias for f in cls.model_fields.values() if f.alias)
        return frozenset(keys)

    def resolved_paths(self) -> Dict[str, Path]:
        return {
            "train_images": self.train_images or self._default_file(TRAIN_IMAGES),
            "train_labels": self.train_labels or self._default_file(TRAIN_LABELS),
            "test_images": self.test_images or self._default_file(TEST_IMAGES),
            "test_labels": self.test_labels or self._default_file(TEST_LABELS),
        }

    def _default_file(self, stem: str) -> Path:
        plain = self.data_dir / stem
        zipped = self.data_dir / f"{stem}.gz"
        return zipped if zipped.exists() and not plain.exists() else plain

    def echo(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)

    def fingerprint(self, stage: Optional[str] = None) -> str:
        """Stage fingerprint; ``None`` hashes the whole config."""
        payload = self.echo()
        if stage is not None:
            payload = {name: payload[self._key(name)] for name in self._stage_fields(stage)}
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def _stage_fields(self, stage: str) -> Iterable[str]:
        fields = STAGE_FIELDS[stage]
        if self.guidance == Guidance.ORIGIN:
            surrogate_only = set(_SURROGATE_FIELDS) - set(_DATABASE_FIELDS) - {"k", "layer", "guidance"}
            fields = [f for f in fields if f not in surrogate_only]
        return fields

    @classmethod
    def _key(cls, name: str) -> str:
        return cls.model_fields[name].alias or name
