import hashlib
import json
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from advknn.models.common_models import AttackKind, Guidance

LINF_SLACK = 1e-6


class AttackConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: AttackKind = AttackKind.BIM
    epsilon: float = Field(default=0.25, ge=0, le=1)
    alpha: float = Field(default=0.01, ge=0)
    steps: int = Field(default=100, ge=1)
    guidance: Guidance = Guidance.DKNNB_CL
    layer: int = Field(default=3, ge=1)

    @model_validator(mode="after")
    def _check_budget(self) -> "AttackConfig":
        if self.alpha > self.epsilon:
            raise ValueError(f"alpha ({self.alpha}) must not exceed epsilon ({self.epsilon})")
        return self

    @property
    def fingerprint(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


class Predictions(BaseModel):
    model_config = ConfigDict(frozen=True)

    dnn: int
    knn: int
    dknn: int


class AdversarialRecord(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    index: int = Field(ge=0)
    label: int = Field(ge=0)
    original: np.ndarray
    adversarial: np.ndarray
    l2: float = Field(ge=0)
    linf: float = Field(ge=0)
    before: Predictions
    after: Predictions
    credibility_clean: float = Field(ge=0, le=1)
    credibility: float = Field(ge=0, le=1)
    epsilon: float = Field(ge=0, le=1)
    attack_fingerprint: str = ""

    @field_validator("original", "adversarial", mode="before")
    @classmethod
    def _freeze(cls, value: Any) -> np.ndarray:
        array = np.array(value, copy=True)
        array.setflags(write=False)
        return array

    @model_validator(mode="after")
    def _check_ball(self) -> "AdversarialRecord":
        if self.original.shape != self.adversarial.shape:
            raise ValueError("original and adversarial images differ in shape")
        if self.adversarial.size and (self.adversarial.min() < 0 or self.adversarial.max() > 1):
            raise ValueError("adversarial pixels must lie in [0, 1]")
        if self.linf > self.epsilon + LINF_SLACK:
            raise ValueError(f"L-inf distortion {self.linf} exceeds epsilon {self.epsilon}")
        return self

    @property
    def delta(self) -> np.ndarray:
        return self.adversarial - self.original

    @classmethod
    def from_images(cls, index: int, label: int, original: np.ndarray, adversarial: np.ndarray,
                    before: Predictions, after: Predictions, credibility_clean: float, credibility: float,
                    epsilon: float, attack_fingerprint: Optional[str] = "") -> "AdversarialRecord":
        delta = np.asarray(adversarial, dtype=np.float64) - np.asarray(original, dtype=np.float64)
        return cls(index=index, label=label, original=original, adversarial=adversarial,
                   l2=float(np.sqrt(np.sum(delta * delta))), linf=float(np.max(np.abs(delta), initial=0.0)),
                   before=before, after=after, credibility_clean=credibility_clean, credibility=credibility,
                   epsilon=epsilon, attack_fingerprint=attack_fingerprint or "")
