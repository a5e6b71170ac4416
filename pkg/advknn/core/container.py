"""
Binary container shared by checkpoints, feature databases, calibration tables,
surrogate heads and adversarial records.

Layout (all integers little-endian):
    magic        8 bytes  b"ADVKNN\\x00\\x01"
    header_len   u32
    header       UTF-8 JSON (ContainerHeader)
    blobs        per manifest entry: u64 byte length, raw little-endian payload
    crc32        u32 over every preceding byte
"""
import logging
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np
from pydantic import ValidationError

from advknn.core.exceptions import ChecksumError, FormatError, VersionMismatchError
from advknn.models.artifact_models import ContainerHeader, TensorEntry

logger = logging.getLogger(__name__)

MAGIC = b"ADVKNN\x00\x01"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"<f4", "<f8", "<i4", "<i8"}
_MIN_SIZE = len(MAGIC) + 4 + 4


@dataclass(frozen=True)
class Container:
    header: ContainerHeader
    arrays: Dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.arrays[name]
        except KeyError:
            raise FormatError(f"{self.header.kind} container has no tensor {name!r}") from None

    @property
    def meta(self) -> Dict[str, Any]:
        return self.header.meta


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    dtype = array.dtype.newbyteorder("<")
    if dtype.str not in _ALLOWED_DTYPES:
        raise FormatError(f"cannot store dtype {array.dtype} (allowed: float32, float64, int32, int64)")
    return array.astype(dtype, copy=False)


def encode_container(kind: str, arrays: Mapping[str, np.ndarray], fingerprint: str = "",
                     config: Optional[Dict[str, Any]] = None, meta: Optional[Dict[str, Any]] = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, array in arrays.items():
        array = _little_endian(np.asarray(array))
        payload = array.tobytes(order="C")
        entries.append(TensorEntry(name=name, dtype=array.dtype.str, shape=list(array.shape),
                                   offset=offset + 8, nbytes=len(payload)))
        blobs.append(struct.pack("<Q", len(payload)) + payload)
        offset += 8 + len(payload)

    header = ContainerHeader(format_version=FORMAT_VERSION, kind=kind, fingerprint=fingerprint,
                             config=config, meta=meta or {}, tensors=entries)
    header_bytes = header.model_dump_json().encode("utf-8")
    body = MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_container(raw: bytes, source: str = "<bytes>", kind: Optional[str] = None) -> Container:
    if len(raw) < _MIN_SIZE:
        raise ChecksumError(f"{source}: file is truncated ({len(raw)} bytes)")
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{source}: not an advknn container (bad magic)")
    body, (stored,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise ChecksumError(f"{source}: CRC32 mismatch (file truncated or corrupted)")

    (header_len,) = struct.unpack_from("<I", body, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = ContainerHeader.model_validate_json(body[start:start + header_len])
    except ValidationError as e:
        raise FormatError(f"{source}: malformed header: {e.errors()[0]['msg']}") from e
    if header.format_version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{source}: container format version {header.format_version}, expected {FORMAT_VERSION}")
    if kind is not None and header.kind != kind:
        raise FormatError(f"{source}: expected a {kind} container, found {header.kind}")

    blob_base = start + header_len
    arrays: Dict[str, np.ndarray] = {}
    for entry in header.tensors:
        begin = blob_base + entry.offset
        (length,) = struct.unpack_from("<Q", body, begin - 8)
        if length != entry.nbytes or begin + length > len(body):
            raise FormatError(f"{source}: blob {entry.name!r} length does not match its manifest entry")
        array = np.frombuffer(body, dtype=np.dtype(entry.dtype), count=length // np.dtype(entry.dtype).itemsize,
                              offset=begin).reshape(entry.shape)
        array = array.astype(array.dtype.newbyteorder("="), copy=True)
        array.setflags(write=False)
        arrays[entry.name] = array
    return Container(header=header, arrays=arrays)


def write_container(path: Path, kind: str, arrays: Mapping[str, np.ndarray], fingerprint: str = "",
                    config: Optional[Dict[str, Any]] = None, meta: Optional[Dict[str, Any]] = None) -> Path:
    """Encode and write atomically (temporary file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = encode_container(kind, arrays, fingerprint=fingerprint, config=config, meta=meta)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except OSError:
        tmp.unlink(missing_ok=True)
        raise
    logger.info(f"Wrote {kind} container {path} ({len(raw)} bytes)")
    return path


def read_container(path: Path, kind: Optional[str] = None) -> Container:
    path = Path(path)
    raw = path.read_bytes()
    container = decode_container(raw, source=str(path), kind=kind)
    logger.debug(f"Read {container.header.kind} container {path}")
    return container
