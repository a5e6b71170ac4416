from typing import Any, Dict, Optional


class AdvKnnError(Exception):
    """Base class for every error the toolkit raises on purpose."""

    code = "advknn_error"
    exit_code = 1

    def details(self) -> Dict[str, Any]:
        return {}


class DimensionError(AdvKnnError, ValueError):
    code = "dimension_error"

    def __init__(self, operation: str, message: str):
        super().__init__(f"{operation}: {message}")
        self.operation = operation


class ContractError(AdvKnnError, ValueError):
    code = "contract_error"


class NumericError(AdvKnnError, ArithmeticError):
    code = "numeric_error"


class FormatError(AdvKnnError, ValueError):
    code = "format_error"


class TruncationError(FormatError):
    code = "truncation_error"


class PairingError(AdvKnnError, ValueError):
    code = "pairing_error"


class CoverageError(AdvKnnError, ValueError):
    code = "coverage_error"

    def __init__(self, message: str, label: int):
        super().__init__(message)
        self.label = label

    def details(self) -> Dict[str, Any]:
        return {"class": self.label}


class ConfigurationError(AdvKnnError, ValueError):
    code = "configuration_error"
    exit_code = 2


class ConfigParseError(ConfigurationError):
    code = "config_parse_error"

    def __init__(self, message: str, line: int = 0):
        super().__init__(message)
        self.line = line

    def details(self) -> Dict[str, Any]:
        return {"line": self.line}


class TrainingError(AdvKnnError, RuntimeError):
    code = "training_error"

    def __init__(self, message: str, epoch: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch

    def details(self) -> Dict[str, Any]:
        return {"epoch": self.epoch}


class ChecksumError(FormatError):
    code = "checksum_error"


class VersionMismatchError(FormatError):
    code = "version_mismatch"


class ShapeMismatchError(AdvKnnError, ValueError):
    code = "shape_mismatch"


class FingerprintMismatchError(AdvKnnError, ValueError):
    code = "fingerprint_mismatch"


class NeighborRangeError(AdvKnnError, ValueError):
    code = "neighbor_range_error"


class DistributionError(AdvKnnError, ValueError):
    code = "distribution_error"


class AttackError(AdvKnnError, ValueError):
    code = "attack_error"


class ConsistencyError(AdvKnnError, ValueError):
    code = "consistency_error"


class InvalidGridError(AdvKnnError, ValueError):
    code = "invalid_grid"
    exit_code = 2


class ExportError(AdvKnnError, OSError):
    code = "export_error"


class DependencyError(AdvKnnError, RuntimeError):
    code = "missing_dependency"
    exit_code = 3

    def __init__(self, message: str, artifact: str):
        super().__init__(message)
        self.artifact = artifact

    def details(self) -> Dict[str, Any]:
        return {"artifact": self.artifact}
