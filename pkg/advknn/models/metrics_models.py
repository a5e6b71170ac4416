from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, model_validator

CLASSIFIERS = ("dnn", "knn", "dknn")

# Published centroid-line heuristic attack, kept only as a comparison point.
CENTROID_HEURISTIC_BASELINE = {
    "dknn_accuracy": 0.1744,
    "mean_l2": 3.476,
    "mean_credibility": 0.1037,
}


class ClassifierMetrics(BaseModel):
    correct: int = Field(ge=0)
    total: int = Field(ge=0)

    @model_validator(mode="after")
    def _check_counts(self) -> "ClassifierMetrics":
        if self.correct > self.total:
            raise ValueError("correct count exceeds total")
        return self

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    @property
    def success_rate(self) -> float:
        return 1.0 - self.accuracy


class MetricsReport(BaseModel):
    samples: int = Field(ge=0)
    adversarial: Dict[str, ClassifierMetrics]
    clean: Dict[str, ClassifierMetrics]
    mean_l2: float = Field(ge=0)
    mean_l2_successful: Optional[float] = None
    mean_linf: float = Field(ge=0)
    mean_credibility: float = Field(ge=0, le=1)
    mean_clean_credibility: float = Field(ge=0, le=1)
    credibility_histogram: List[int]
    config: Dict[str, Any] = Field(default_factory=dict)
    attack_fingerprint: str = ""
    baseline: Dict[str, float] = Field(default_factory=lambda: dict(CENTROID_HEURISTIC_BASELINE))

    def accuracy(self, classifier: str) -> float:
        return self.adversarial[classifier].accuracy

    def success_rate(self, classifier: str) -> float:
        return self.adversarial[classifier].success_rate

    def to_row(self) -> Dict[str, Any]:
        """Flat CSV row: config echo first, then metrics."""
        row: Dict[str, Any] = dict(self.config)
        row["samples"] = self.samples
        for name in CLASSIFIERS:
            row[f"{name}_clean_accuracy"] = self.clean[name].accuracy
            row[f"{name}_accuracy"] = self.adversarial[name].accuracy
            row[f"{name}_success_rate"] = self.adversarial[name].success_rate
        row["mean_l2"] = self.mean_l2
        row["mean_l2_successful"] = self.mean_l2_successful
        row["mean_linf"] = self.mean_linf
        row["mean_credibility"] = self.mean_credibility
        row["mean_clean_credibility"] = self.mean_clean_credibility
        for i, count in enumerate(self.credibility_histogram):
            row[f"cred_bin_{i}"] = count
        for key, value in self.baseline.items():
            row[f"baseline_{key}"] = value
        row["attack_fingerprint"] = self.attack_fingerprint
        return row


class DetectionPoint(BaseModel):
    threshold: float
    detected: float = Field(ge=0, le=1)
    rejected: float = Field(ge=0, le=1)


class DetectionCurve(BaseModel):
    points: List[DetectionPoint]

    def at(self, threshold: float) -> DetectionPoint:
        for point in self.points:
            if point.threshold == threshold:
                return point
        raise KeyError(threshold)
