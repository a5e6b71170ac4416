import gzip
import logging
import struct
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np
import requests

from advknn.config import settings
from advknn.core.exceptions import ConfigurationError, CoverageError, FormatError, PairingError, TruncationError
from advknn.models.dataset_models import Dataset, SplitSet
from advknn.models.run_models import TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS, RunConfig

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class Holdout(NamedTuple):
    calibration: Dataset
    test: Dataset
    calibration_indices: np.ndarray
    test_indices: np.ndarray


def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _write_bytes(path: Path, raw: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as fh:
            fh.write(raw)
    else:
        path.write_bytes(raw)


def _parse_idx(raw: bytes, magic: int, ndim: int, source: Path) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{source}: too short to hold an IDX magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{source}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise TruncationError(f"{source}: header ends after {len(raw)} bytes")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims, dtype=np.int64))
    body = len(raw) - header_len
    if body != expected:
        raise TruncationError(f"{source}: header promises {expected} data bytes, file holds {body}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def load_idx(images_path: Path, labels_path: Path, num_classes: int = 10, name: Optional[str] = None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled from 0-255 to [0, 1]."""
    try:
        images = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, 3, Path(images_path))
        labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, 1, Path(labels_path))
    except OSError as e:
        logger.error(f"Error reading IDX files: {e}")
        raise
    if images.shape[0] != labels.shape[0]:
        raise PairingError(f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels")
    if labels.size and labels.max() >= num_classes:
        raise FormatError(f"{labels_path}: label {int(labels.max())} outside [0, {num_classes})")

    pixels = images.astype(np.float32)[:, None, :, :] / np.float32(255.0)
    dataset = Dataset(images=pixels, labels=labels.astype(np.int64), num_classes=num_classes,
                      name=name or Path(images_path).name.split("-")[0])
    logger.info(f"Loaded {len(dataset)} samples of shape {list(dataset.image_shape)} from {images_path}")
    return dataset


def write_idx(dataset: Dataset, images_path: Path, labels_path: Path) -> None:
    """Serialise back to IDX bytes (pixels x 255, rounded to nearest)."""
    n, _, h, w = dataset.images.shape
    pixels = np.rint(np.asarray(dataset.images, dtype=np.float64) * 255.0).astype(np.uint8)
    _write_bytes(images_path, struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + pixels.reshape(n, h, w).tobytes())
    _write_bytes(labels_path, struct.pack(">II", LABEL_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


def holdout_calibration(test: Dataset, per_class: int = 75, seed: int = 0) -> Holdout:
    """Draw ``per_class`` samples of every class uniformly at random and remove them from the test split."""
    rng = np.random.default_rng(seed)
    chosen = []
    for label in range(test.num_classes):
        members = np.flatnonzero(test.labels == label)
        if members.size < per_class:
            raise CoverageError(f"class {label} has {members.size} test samples, calibration needs {per_class}",
                                label=label)
        if per_class:
            chosen.append(rng.choice(members, size=per_class, replace=False))

    calibration_indices = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
    test_indices = np.setdiff1d(np.arange(len(test)), calibration_indices)
    return Holdout(
        calibration=test.subset(calibration_indices, name=f"{test.name}-calibration"),
        test=test.subset(test_indices),
        calibration_indices=calibration_indices,
        test_indices=test_indices,
    )


def make_splits(train: Dataset, test: Dataset, per_class: int = 75, seed: int = 0) -> SplitSet:
    holdout = holdout_calibration(test, per_class=per_class, seed=seed)
    return SplitSet(train=train, test=holdout.test, calibration=holdout.calibration,
                    test_indices=holdout.test_indices, calibration_indices=holdout.calibration_indices)


def load_splits(config: RunConfig) -> SplitSet:
    paths = config.resolved_paths()
    train = load_idx(paths["train_images"], paths["train_labels"], config.num_classes, name=config.dataset)
    test = load_idx(paths["test_images"], paths["test_labels"], config.num_classes, name=config.dataset)
    if train.image_shape != test.image_shape:
        raise PairingError(f"train images are {list(train.image_shape)} but test images are {list(test.image_shape)}")
    return make_splits(train, test, per_class=config.calibration_per_class, seed=config.seed)


class IdxMirrorClient:
    """Downloads gzip IDX files from the known dataset mirrors; existing files are kept."""

    def __init__(self, session: Optional[requests.Session] = None):
        self._mirrors = {"mnist": settings.mnist_url, "fashion-mnist": settings.fashion_mnist_url}
        self._session = session
        self._initialize_session()

    def _initialize_session(self) -> None:
        if self._session is None:
            self._session = requests.Session()
        logger.debug(f"Mirror client ready for {sorted(self._mirrors)}")

    def mirror_for(self, name: str, base_url: Optional[str] = None) -> str:
        key = name.lower().replace("_", "-")
        if base_url is None and key not in self._mirrors:
            raise ConfigurationError(f"no download mirror known for dataset {name!r}")
        return (base_url or self._mirrors[key]).rstrip("/") + "/"

    def download(self, url: str, target: Path) -> Path:
        try:
            response = self._session.get(url, timeout=settings.request_timeout)
            response.raise_for_status()
        except requests.RequestException as e:
            logger.error(f"Error downloading {url}: {e}")
            raise
        tmp = target.with_name(f".{target.name}.tmp")
        tmp.write_bytes(response.content)
        tmp.replace(target)
        logger.info(f"Fetched {url} ({len(response.content)} bytes)")
        return target

    def fetch(self, name: str, dest_dir: Path, base_url: Optional[str] = None) -> List[Path]:
        base_url = self.mirror_for(name, base_url)
        dest_dir = Path(dest_dir)
        dest_dir.mkdir(parents=True, exist_ok=True)

        written = []
        for stem in (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS):
            target = dest_dir / f"{stem}.gz"
            if target.exists() or (dest_dir / stem).exists():
                logger.info(f"{stem} already present in {dest_dir}")
                written.append(target if target.exists() else dest_dir / stem)
                continue
            written.append(self.download(f"{base_url}{stem}.gz", target))
        return written


def fetch_idx_dataset(name: str, dest_dir: Path, base_url: Optional[str] = None,
                      client: Optional[IdxMirrorClient] = None) -> List[Path]:
    """Download the four gzip IDX files of ``mnist`` or ``fashion-mnist``."""
    return (client or IdxMirrorClient()).fetch(name, dest_dir, base_url=base_url)
