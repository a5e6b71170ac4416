import logging
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional

from advknn.core.container import read_container
from advknn.core.exceptions import AdvKnnError, DependencyError
from advknn.models.artifact_models import ArtifactCheckResponse, RunStatusResponse
from advknn.models.common_models import ArtifactStatus, Guidance
from advknn.models.run_models import RunConfig

logger = logging.getLogger(__name__)

# artifact kind -> (stage fingerprint, file extension)
ARTIFACT_KINDS: Dict[str, tuple] = {
    "checkpoint": ("checkpoint", "ckpt"),
    "databases": ("databases", "db"),
    "calibration": ("calibration", "cal"),
    "surrogate": ("surrogate", "head"),
    "records": ("records", "adv"),
}

# command -> artifacts that must already exist
COMMAND_DEPENDENCIES: Dict[str, List[str]] = {
    "train-base": [],
    "build-db": ["checkpoint"],
    "calibrate": ["checkpoint", "databases"],
    "train-surrogate": ["checkpoint", "databases"],
    "attack": ["checkpoint", "databases", "calibration", "surrogate"],
    "evaluate": ["checkpoint", "databases", "calibration", "records"],
    "sweep": ["checkpoint", "databases"],
    "transfer": ["records"],
    "panel": ["checkpoint", "databases"],
}


class ArtifactStore:
    """Write-once artifact files under one output directory, named by stage fingerprint."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)

    def init(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        logger.debug(f"Artifact store at {self.out_dir}")

    def path(self, kind: str, config: RunConfig) -> Path:
        stage, ext = ARTIFACT_KINDS[kind]
        return self.out_dir / f"{kind}-{config.arch.value}-{config.fingerprint(stage)}.{ext}"

    def sidecar(self, kind: str, config: RunConfig, suffix: str = "csv") -> Path:
        return self.path(kind, config).with_suffix(f".{suffix}")

    def report(self, name: str, config: RunConfig, stage: Optional[str] = None, ext: str = "csv") -> Path:
        return self.out_dir / f"{name}-{config.arch.value}-{config.fingerprint(stage)}.{ext}"

    def exists(self, kind: str, config: RunConfig) -> bool:
        return self.path(kind, config).exists()

    def require(self, kind: str, config: RunConfig, command: str) -> Path:
        path = self.path(kind, config)
        if not path.exists():
            raise DependencyError(f"{command} needs the {kind} artifact {path.name}; run the command that builds it first",
                                  artifact=str(path))
        return path

    def require_for(self, command: str, config: RunConfig) -> None:
        for kind in COMMAND_DEPENDENCIES.get(command, []):
            if kind == "surrogate" and config.guidance == Guidance.ORIGIN:
                continue
            self.require(kind, config, command)

    def write_once(self, path: Path, writer: Callable[[Path], None]) -> Path:
        """Run ``writer`` only if nothing has been emitted at ``path`` yet."""
        if path.exists():
            logger.info(f"{path.name} already present, leaving it untouched")
            return path
        path.parent.mkdir(parents=True, exist_ok=True)
        writer(path)
        return path

    def check_all(self, config: RunConfig) -> RunStatusResponse:
        """Report which artifacts of this configuration exist and which commands can run."""
        results = [self._check(kind, config) for kind in ARTIFACT_KINDS]
        present = {r.artifact for r in results if r.status == ArtifactStatus.PRESENT}

        ready = []
        for command, needed in COMMAND_DEPENDENCIES.items():
            needed = [n for n in needed if not (n == "surrogate" and config.guidance == Guidance.ORIGIN)]
            if all(n in present for n in needed):
                ready.append(command)

        return RunStatusResponse(
            fingerprint=config.fingerprint(),
            ready_commands=ready,
            artifacts=results,
            timestamp=datetime.utcnow(),
        )

    def _check(self, kind: str, config: RunConfig) -> ArtifactCheckResponse:
        path = self.path(kind, config)
        if not path.exists():
            return ArtifactCheckResponse(artifact=kind, path=path, status=ArtifactStatus.MISSING)
        try:
            read_container(path)
            return ArtifactCheckResponse(artifact=kind, path=path, status=ArtifactStatus.PRESENT,
                                         size_bytes=path.stat().st_size)
        except (AdvKnnError, OSError) as e:
            logger.error(f"Artifact {path} failed verification: {e}")
            return ArtifactCheckResponse(artifact=kind, path=path, status=ArtifactStatus.CORRUPT, error=str(e))
