from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from advknn.models.common_models import ArtifactStatus


class TensorEntry(BaseModel):
    name: str
    dtype: str
    shape: List[int]
    offset: int = Field(ge=0)
    nbytes: int = Field(ge=0)


class ContainerHeader(BaseModel):
    format_version: int
    kind: str
    fingerprint: str = ""
    config: Optional[Dict[str, Any]] = None
    meta: Dict[str, Any] = Field(default_factory=dict)
    tensors: List[TensorEntry] = Field(default_factory=list)


class ArtifactCheckResponse(BaseModel):
    artifact: str
    path: Path
    status: ArtifactStatus
    size_bytes: Optional[int] = None
    error: Optional[str] = None


class RunStatusResponse(BaseModel):
    fingerprint: str
    ready_commands: List[str]
    artifacts: List[ArtifactCheckResponse]
    timestamp: datetime
