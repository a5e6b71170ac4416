import logging
from abc import ABC, abstractmethod
from typing import Dict, NamedTuple, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from advknn.config import settings
from advknn.core import autodiff as ad
from advknn.core.container import read_container, write_container
from advknn.core.exceptions import (ConfigurationError, DimensionError, NumericError, ShapeMismatchError,
                                    TrainingError)
from advknn.core.parallel import chunk_bounds, map_chunks
from advknn.models.common_models import Activation, Architecture, LayerKind
from advknn.models.dataset_models import Dataset
from advknn.models.network_models import (LayerSpec, NetworkConfig, OptimizerSettings, TrainedNetwork,
                                          TrainingMetadata)

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"


def base_config(num_classes: int = 10, input_shape=(1, 28, 28)) -> NetworkConfig:
    """Three conv blocks and a linear classifier; every block is a capture point."""
    return NetworkConfig(
        arch=Architecture.BASE,
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        layers=[
            LayerSpec(kind=LayerKind.CONV, units=16, kernel=3, pool=True),
            LayerSpec(kind=LayerKind.CONV, units=32, kernel=3, pool=True),
            LayerSpec(kind=LayerKind.CONV, units=64, kernel=3),
            LayerSpec(kind=LayerKind.DENSE, units=num_classes, activation=Activation.NONE),
        ],
        capture_points=[1, 2, 3, 4],
    )


def lenet5_config(num_classes: int = 10, input_shape=(1, 28, 28)) -> NetworkConfig:
    return NetworkConfig(
        arch=Architecture.LENET5,
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        layers=[
            LayerSpec(kind=LayerKind.CONV, units=6, kernel=5, pool=True),
            LayerSpec(kind=LayerKind.CONV, units=16, kernel=5, pool=True),
            LayerSpec(kind=LayerKind.DENSE, units=120),
            LayerSpec(kind=LayerKind.DENSE, units=84),
            LayerSpec(kind=LayerKind.DENSE, units=num_classes, activation=Activation.NONE),
        ],
        capture_points=[1, 2, 3, 4, 5],
    )


def network_config(arch: Architecture, num_classes: int = 10, input_shape=(1, 28, 28)) -> NetworkConfig:
    builders = {Architecture.BASE: base_config, Architecture.LENET5: lenet5_config}
    return builders[Architecture(arch)](num_classes=num_classes, input_shape=input_shape)


def last_conv_layer(config: NetworkConfig) -> int:
    """Capture point (1-based) sitting on the last convolution layer."""
    convs = [i for i, spec in enumerate(config.layers, start=1) if spec.kind == LayerKind.CONV]
    for point, layer in reversed(list(enumerate(config.capture_points, start=1))):
        if convs and layer == convs[-1]:
            return point
    raise ConfigurationError(f"{config.arch.value} exposes no capture point on a convolution layer")


def init_parameters(config: NetworkConfig, seed: int = 0, dtype: str = None) -> Dict[str, np.ndarray]:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype or settings.default_dtype)
    params = {}
    for name, shape in config.parameter_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return params


def _check_capture_point(config: NetworkConfig, point: int) -> int:
    if not 1 <= point <= config.num_capture_points:
        raise ConfigurationError(
            f"capture point {point} does not exist; {config.arch.value} has points 1..{config.num_capture_points}")
    return config.capture_points[point - 1]


def _check_batch(config: NetworkConfig, shape: Sequence[int]) -> None:
    if len(shape) != 4 or tuple(shape[1:]) != tuple(config.input_shape):
        raise DimensionError("forward", f"batch must be [n, {', '.join(map(str, config.input_shape))}], "
                                        f"got {list(shape)}")


def _forward(config: NetworkConfig, params: Dict[str, ad.Tensor], x: ad.Tensor,
             stop_layer: Optional[int] = None) -> Dict[int, ad.Tensor]:
    """Layer outputs keyed by 1-based layer index, up to ``stop_layer``."""
    outputs: Dict[int, ad.Tensor] = {}
    h = x
    for i, spec in enumerate(config.layers, start=1):
        weight, bias = params[f"layer{i}.weight"], params[f"layer{i}.bias"]
        if spec.kind == LayerKind.CONV:
            h = ad.conv2d(h, weight, bias)
        else:
            if len(h.shape) != 2:
                h = ad.flatten(h)
            h = ad.affine(h, weight, bias)
        if spec.activation == Activation.RELU:
            h = ad.relu(h)
        if spec.pool:
            h = ad.maxpool2x2(h)
        outputs[i] = h
        if stop_layer is not None and i >= stop_layer:
            break
    return outputs


def _parameter_tensors(net: TrainedNetwork) -> Dict[str, ad.Tensor]:
    return {name: ad.Tensor(array) for name, array in net.parameters.items()}


def _flat(tensor: ad.Tensor) -> np.ndarray:
    data = tensor.numpy()
    return data.reshape(data.shape[0], -1)


class ForwardResult(NamedTuple):
    logits: np.ndarray
    activations: Dict[int, np.ndarray]


def forward_with_activations(net: TrainedNetwork, batch: Union[np.ndarray, ad.Tensor]) -> ForwardResult:
    """Logits plus the flattened activation at every capture point (keyed 1..L)."""
    data = batch.numpy() if isinstance(batch, ad.Tensor) else np.asarray(batch)
    _check_batch(net.config, data.shape)
    params = _parameter_tensors(net)
    with ad.inference():
        outputs = _forward(net.config, params, ad.Tensor(data, dtype=net.dtype))
    last = len(net.config.layers)
    activations = {point: _flat(outputs[layer]) for point, layer in enumerate(net.config.capture_points, start=1)}
    return ForwardResult(logits=outputs[last].numpy(), activations=activations)


def extract_features(net: TrainedNetwork, images: np.ndarray, point: int, workers: int = 1) -> np.ndarray:
    """Flattened capture-point activations for many images, batched and merged in input order."""
    layer = _check_capture_point(net.config, point)
    images = np.asarray(images)
    _check_batch(net.config, images.shape)
    params = _parameter_tensors(net)

    def run(chunk: slice) -> np.ndarray:
        with ad.inference():
            out = _forward(net.config, params, ad.Tensor(images[chunk], dtype=net.dtype), stop_layer=layer)
        return _flat(out[layer])

    if images.shape[0] == 0:
        return np.zeros((0, net.config.feature_width(point)), dtype=net.dtype)
    return map_chunks(run, images.shape[0], settings.inference_batch_size, workers=workers)


def compute_logits(net: TrainedNetwork, images: np.ndarray, workers: int = 1) -> np.ndarray:
    params = _parameter_tensors(net)
    images = np.asarray(images)
    _check_batch(net.config, images.shape)

    def run(chunk: slice) -> np.ndarray:
        with ad.inference():
            out = _forward(net.config, params, ad.Tensor(images[chunk], dtype=net.dtype))
        return out[len(net.config.layers)].numpy()

    return map_chunks(run, images.shape[0], settings.inference_batch_size, workers=workers)


def predict(net: TrainedNetwork, images: np.ndarray, workers: int = 1) -> np.ndarray:
    if np.asarray(images).shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(compute_logits(net, images, workers=workers), axis=1).astype(np.int64)


def evaluate_accuracy(net: TrainedNetwork, dataset: Dataset, workers: int = 1) -> float:
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict(net, dataset.images, workers=workers) == dataset.labels))


class LossHead(ABC):
    """A scalar loss attached to one capture point (``layer``) or to the logits (``layer is None``)."""

    layer: Optional[int] = None

    @abstractmethod
    def loss(self, feature: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
        ...


class LogitsCrossEntropyHead(LossHead):
    """Cross-entropy of softmax(logits) against the labels, summed over the batch."""

    layer = None

    def loss(self, feature: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
        target = ad.one_hot(labels, feature.shape[1], dtype=feature.dtype)
        return ad.cross_entropy(ad.softmax(feature), target, reduction="sum")


def input_gradient(net: TrainedNetwork, head: LossHead, x: np.ndarray, target: Union[int, Sequence[int]]) -> np.ndarray:
    """d loss / d x for a single image [1, H, W] or a batch [n, 1, H, W]; same shape as ``x``."""
    x = np.asarray(x)
    single = x.ndim == len(net.config.input_shape)
    batch = x[None] if single else x
    _check_batch(net.config, batch.shape)
    labels = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if labels.shape[0] != batch.shape[0]:
        raise DimensionError("input_gradient", f"{batch.shape[0]} images but {labels.shape[0]} targets")

    layer = len(net.config.layers) if head.layer is None else _check_capture_point(net.config, head.layer)
    params = _parameter_tensors(net)
    with ad.Graph() as graph:
        image = graph.leaf(batch, dtype=net.dtype)
        feature = _forward(net.config, params, image, stop_layer=layer)[layer]
        if len(feature.shape) != 2:
            feature = ad.flatten(feature)
        loss = head.loss(feature, labels)
        grad = ad.backward(loss, [image])[image.node_id].numpy()
    return grad[0] if single else grad


class BaseTrainer:
    """Mini-batch SGD with momentum on softmax cross-entropy."""

    def __init__(self, config: NetworkConfig, optimizer: OptimizerSettings = None, dtype: str = None):
        self.config = config
        self.optimizer = optimizer or OptimizerSettings()
        self.dtype = np.dtype(dtype or settings.default_dtype)

    def train(self, train: Dataset, test: Optional[Dataset] = None) -> TrainedNetwork:
        if len(train) == 0:
            raise TrainingError("cannot train on an empty dataset", epoch=0)
        opt = self.optimizer
        _check_batch(self.config, train.images.shape)
        params = init_parameters(self.config, seed=opt.seed, dtype=self.dtype)
        velocity = {name: np.zeros_like(p) for name, p in params.items()}
        shuffler = np.random.default_rng([opt.seed, 1])
        images = train.images.astype(self.dtype, copy=False)
        n = len(train)
        names = list(params)

        final_loss = None
        train_accuracy = None
        for epoch in range(1, opt.epochs + 1):
            order = shuffler.permutation(n)
            total_loss = 0.0
            correct = 0
            batches = chunk_bounds(n, opt.batch_size)
            for chunk in tqdm(batches, desc=f"epoch {epoch}/{opt.epochs}", leave=False,
                              disable=not settings.progress):
                idx = order[chunk]
                try:
                    loss, logits, grads = self._step(params, names, images[idx], train.labels[idx])
                except NumericError as e:
                    logger.error(f"Training diverged in epoch {epoch}: {e}")
                    raise TrainingError(f"training diverged in epoch {epoch}: {e}", epoch=epoch) from e
                if not np.isfinite(loss):
                    logger.error(f"Training diverged in epoch {epoch}: loss is {loss}")
                    raise TrainingError(f"training loss became {loss} in epoch {epoch}", epoch=epoch)
                total_loss += loss * len(idx)
                correct += int(np.sum(np.argmax(logits, axis=1) == train.labels[idx]))
                with np.errstate(over="ignore", invalid="ignore"):
                    for name in names:
                        velocity[name] = (opt.momentum * velocity[name] - opt.learning_rate * grads[name]).astype(self.dtype)
                        params[name] = params[name] + velocity[name]
            final_loss = total_loss / n
            train_accuracy = correct / n
            logger.info(f"Epoch {epoch}/{opt.epochs} loss {final_loss:.4f} train accuracy {train_accuracy:.4f}")

        interim = TrainedNetwork(config=self.config, parameters=params, metadata=self._metadata(final_loss,
                                                                                                  train_accuracy))
        test_accuracy = evaluate_accuracy(interim, test) if test is not None else None
        if test_accuracy is not None:
            logger.info(f"Test accuracy {test_accuracy:.4f}")
        return TrainedNetwork(config=self.config, parameters=params,
                              metadata=self._metadata(final_loss, train_accuracy, test_accuracy))

    def _step(self, params, names, x, y):
        with np.errstate(over="ignore", invalid="ignore"), ad.Graph() as graph:
            leaves = {name: graph.leaf(params[name]) for name in names}
            image = graph.constant(x, dtype=self.dtype)
            logits = _forward(self.config, leaves, image)[len(self.config.layers)]
            target = ad.one_hot(y, self.config.num_classes, dtype=self.dtype)
            loss = ad.cross_entropy(ad.softmax(logits), target, reduction="mean")
            grads = ad.backward(loss, list(leaves.values()))
        return loss.item(), logits.numpy(), {name: grads[leaves[name].node_id].numpy() for name in names}

    def _metadata(self, final_loss, train_accuracy, test_accuracy=None) -> TrainingMetadata:
        opt = self.optimizer
        return TrainingMetadata(seed=opt.seed, epochs=opt.epochs, batch_size=opt.batch_size,
                                learning_rate=opt.learning_rate, momentum=opt.momentum, final_loss=final_loss,
                                train_accuracy=train_accuracy, test_accuracy=test_accuracy)


def train_base(train: Dataset, config: NetworkConfig, optimizer: OptimizerSettings = None,
               seed: Optional[int] = None, test: Optional[Dataset] = None, dtype: str = None) -> TrainedNetwork:
    optimizer = optimizer or OptimizerSettings()
    if seed is not None:
        optimizer = optimizer.model_copy(update={"seed": seed})
    return BaseTrainer(config, optimizer, dtype=dtype).train(train, test)


def save_checkpoint(net: TrainedNetwork, path, run_config: Optional[dict] = None, fingerprint: str = ""):
    meta = {
        "network": net.config.model_dump(mode="json"),
        "training": net.metadata.model_dump(mode="json"),
        "network_fingerprint": net.fingerprint,
    }
    return write_container(path, CHECKPOINT_KIND, net.parameters, fingerprint=fingerprint,
                           config=run_config, meta=meta)


def load_checkpoint(path, config: Optional[NetworkConfig] = None) -> TrainedNetwork:
    """Load a checkpoint; with ``config`` given the stored tensors must fit that slot."""
    container = read_container(path, kind=CHECKPOINT_KIND)
    stored = NetworkConfig.model_validate(container.meta["network"])
    if config is not None:
        expected = config.parameter_shapes()
        found = {name: tuple(array.shape) for name, array in container.arrays.items()}
        if expected != found:
            missing = sorted(set(expected) ^ set(found))
            detail = f"tensors {missing}" if missing else next(
                f"{name}: stored {list(found[name])} vs expected {list(shape)}"
                for name, shape in expected.items() if found[name] != shape)
            raise ShapeMismatchError(f"{path} ({stored.arch.value}) does not fit a {config.arch.value} network: {detail}")
        stored = config
    net = TrainedNetwork(config=stored, parameters=container.arrays,
                         metadata=TrainingMetadata.model_validate(container.meta["training"]))
    logger.info(f"Loaded {stored.arch.value} checkpoint {path}")
    return net
