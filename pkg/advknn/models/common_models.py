from enum import Enum


class Architecture(str, Enum):
    BASE = "base"
    LENET5 = "lenet5"


class LayerKind(str, Enum):
    CONV = "conv"
    DENSE = "dense"


class Activation(str, Enum):
    RELU = "relu"
    NONE = "none"


class DistanceMetric(str, Enum):
    EUCLIDEAN = "euclidean"
    COSINE = "cosine"


class AttackKind(str, Enum):
    FGSM = "fgsm"
    BIM = "bim"


class Guidance(str, Enum):
    ORIGIN = "origin"
    DKNNB = "dknnb"
    DKNNB_CL = "dknnb-cl"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.lower() in ("dknnb+cl", "dknnb_cl"):
            return cls.DKNNB_CL
        return None


class SweepAxis(str, Enum):
    EPSILON = "epsilon"
    K = "k"
    LAYER = "layer"


class ArtifactStatus(str, Enum):
    PRESENT = "present"
    MISSING = "missing"
    CORRUPT = "corrupt"
