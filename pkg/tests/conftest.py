import os

os.environ.setdefault("ADVKNN_PROGRESS", "false")

import numpy as np
import pytest

from advknn.models.common_models import Activation, Architecture, DistanceMetric, LayerKind
from advknn.models.dataset_models import Dataset
from advknn.models.neighbor_models import FeatureDatabase
from advknn.models.network_models import (LayerSpec, NetworkConfig, OptimizerSettings, TrainedNetwork,
                                          TrainingMetadata)
from advknn.services import dataio, network

NUM_CLASSES = 3
IMAGE_SIDE = 8


def blob_images(labels: np.ndarray, seed: int, side: int = IMAGE_SIDE) -> np.ndarray:
    """Class c lights a 3x3 patch at its own position; uniform noise elsewhere."""
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 0.2, size=(labels.size, 1, side, side))
    corners = [(1, 1), (1, side - 4), (side - 4, 2)]
    for i, label in enumerate(labels):
        r, c = corners[int(label) % len(corners)]
        images[i, 0, r:r + 3, c:c + 3] = rng.uniform(0.8, 1.0, size=(3, 3))
    return images.astype(np.float32)


def make_dataset(n: int, seed: int, name: str = "blobs") -> Dataset:
    labels = np.arange(n) % NUM_CLASSES
    return Dataset(images=blob_images(labels, seed), labels=labels, num_classes=NUM_CLASSES, name=name)


@pytest.fixture
def tiny_config() -> NetworkConfig:
    return NetworkConfig(
        arch=Architecture.BASE,
        input_shape=(1, IMAGE_SIDE, IMAGE_SIDE),
        num_classes=NUM_CLASSES,
        layers=[
            LayerSpec(kind=LayerKind.CONV, units=3, kernel=3, pool=True),
            LayerSpec(kind=LayerKind.CONV, units=4, kernel=3, pool=True),
            LayerSpec(kind=LayerKind.DENSE, units=NUM_CLASSES, activation=Activation.NONE),
        ],
        capture_points=[1, 2, 3],
    )


@pytest.fixture
def random_net(tiny_config) -> TrainedNetwork:
    """Untrained float64 network for gradient checks."""
    params = network.init_parameters(tiny_config, seed=3, dtype="float64")
    metadata = TrainingMetadata(seed=3, epochs=0, batch_size=1, learning_rate=0.01, momentum=0.9)
    return TrainedNetwork(config=tiny_config, parameters=params, metadata=metadata)


@pytest.fixture(scope="session")
def blob_train() -> Dataset:
    return make_dataset(90, seed=11, name="blobs-train")


@pytest.fixture(scope="session")
def blob_test() -> Dataset:
    return make_dataset(60, seed=12, name="blobs-test")


@pytest.fixture(scope="session")
def trained_net(blob_train) -> TrainedNetwork:
    config = NetworkConfig(
        arch=Architecture.BASE,
        input_shape=(1, IMAGE_SIDE, IMAGE_SIDE),
        num_classes=NUM_CLASSES,
        layers=[
            LayerSpec(kind=LayerKind.CONV, units=3, kernel=3, pool=True),
            LayerSpec(kind=LayerKind.CONV, units=4, kernel=3, pool=True),
            LayerSpec(kind=LayerKind.DENSE, units=NUM_CLASSES, activation=Activation.NONE),
        ],
        capture_points=[1, 2, 3],
    )
    optimizer = OptimizerSettings(learning_rate=0.05, momentum=0.9, epochs=15, batch_size=16, seed=0)
    return network.train_base(blob_train, config, optimizer, dtype="float64")


@pytest.fixture
def toy_database() -> FeatureDatabase:
    rng = np.random.default_rng(5)
    features = rng.standard_normal((200, 6))
    labels = rng.integers(0, 4, size=200)
    return FeatureDatabase(features=features, labels=labels, layer=1, network_fingerprint="toy",
                           num_classes=4, metric=DistanceMetric.EUCLIDEAN)


@pytest.fixture
def idx_dir(tmp_path):
    """Synthetic 28x28 MNIST-shaped IDX files under standard names."""
    train = Dataset(images=blob_images(np.arange(120) % 10, 21, side=28), labels=np.arange(120) % 10,
                    num_classes=10)
    test = Dataset(images=blob_images(np.arange(100) % 10, 22, side=28), labels=np.arange(100) % 10,
                   num_classes=10)
    dataio.write_idx(train, tmp_path / "train-images-idx3-ubyte", tmp_path / "train-labels-idx1-ubyte")
    dataio.write_idx(test, tmp_path / "t10k-images-idx3-ubyte", tmp_path / "t10k-labels-idx1-ubyte")
    return tmp_path
