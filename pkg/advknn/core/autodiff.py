"""
Dense tensors and reverse-mode differentiation over straight-line graphs.

Operations run eagerly. When a :class:`Graph` is active (``with Graph() as g``)
every operation is also recorded on it together with its vector-Jacobian
product, and :func:`backward` replays the records in reverse. Without an
active graph the same calls are plain inference.

Shape rules:
    affine      x [n, d] @ w [d, m] + b [m]             -> [n, m]
    conv2d      x [n, c, h, w] * k [o, c, kh, kw] + b [o] -> [n, o, h, w]
                (stride 1, zero "same" padding, odd kernels)
    maxpool2x2  [n, c, h, w] -> [n, c, h // 2, w // 2]    (stride 2)
    flatten     [n, ...] -> [n, prod(...)]
    softmax     along the last axis
    reduce_*    axis=None -> shape [1]
"""
import contextlib
import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from advknn.config import settings
from advknn.core.exceptions import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
REDUCTIONS = ("mean", "sum", "none")

_active_graph: contextvars.ContextVar = contextvars.ContextVar("advknn_active_graph", default=None)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Immutable row-major float array, optionally bound to a graph node."""

    __slots__ = ("_data", "_node_id", "_graph")

    def __init__(self, data: ArrayLike, dtype: Optional[Union[str, np.dtype]] = None,
                 _node_id: Optional[int] = None, _graph: Optional["Graph"] = None):
        if isinstance(data, Tensor):
            data = data._data
        target = np.dtype(dtype) if dtype is not None else None
        array = np.asarray(data)
        if target is None:
            target = array.dtype if array.dtype in FLOAT_DTYPES else np.dtype(settings.default_dtype)
        if target not in FLOAT_DTYPES:
            raise ContractError(f"unsupported tensor dtype {target}; use float32 or float64")
        array = np.array(array, dtype=target, copy=True, order="C")
        if array.ndim == 0:
            array = array.reshape(1)
        array.setflags(write=False)
        self._data = array
        self._node_id = _node_id
        self._graph = _graph

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def node_id(self) -> Optional[int]:
        return self._node_id

    @property
    def graph(self) -> Optional["Graph"]:
        return self._graph

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self._data.reshape(-1)[0])

    def __repr__(self) -> str:
        node = f", node={self._node_id}" if self._node_id is not None else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}{node})"


@dataclass(frozen=True)
class Node:
    id: int
    kind: str
    inputs: Tuple[int, ...]
    output: Tensor
    vjp: Optional[VJP]


class Graph:
    """Single-writer record of operations in topological order."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.roots: List[int] = []
        self._adopted: Dict[int, int] = {}
        self._token = None

    def __enter__(self) -> "Graph":
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active_graph.reset(self._token)
        self._token = None

    def leaf(self, data: ArrayLike, dtype: Optional[Union[str, np.dtype]] = None) -> Tensor:
        """Register a differentiable input (parameter or image)."""
        tensor = self._append("leaf", (), _raw(data, dtype), None)
        self.roots.append(tensor.node_id)
        return tensor

    def constant(self, data: ArrayLike, dtype: Optional[Union[str, np.dtype]] = None) -> Tensor:
        return self._append("constant", (), _raw(data, dtype), None)

    def record(self, kind: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: Optional[VJP]) -> Tensor:
        ids = tuple(self._node_of(t) for t in inputs)
        return self._append(kind, ids, value, vjp)

    def _node_of(self, tensor: Tensor) -> int:
        if tensor.graph is self:
            return tensor.node_id
        # tensors from outside the graph enter as constants
        key = id(tensor)
        if key not in self._adopted:
            self._adopted[key] = self._append("constant", (), tensor.data, None).node_id
        return self._adopted[key]

    def _append(self, kind: str, inputs: Tuple[int, ...], value: np.ndarray, vjp: Optional[VJP]) -> Tensor:
        node_id = len(self.nodes)
        output = Tensor(value, dtype=value.dtype if value.dtype in FLOAT_DTYPES else None,
                        _node_id=node_id, _graph=self)
        self.nodes.append(Node(node_id, kind, inputs, output, vjp))
        return output


def active_graph() -> Optional[Graph]:
    return _active_graph.get()


@contextlib.contextmanager
def inference() -> Iterator[None]:
    """Run operations without recording them, even inside a Graph scope."""
    token = _active_graph.set(None)
    try:
        yield
    finally:
        _active_graph.reset(token)


def _raw(data: ArrayLike, dtype=None) -> np.ndarray:
    return Tensor(data, dtype=dtype).data


def _as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype if like is not None else None)


def one_hot(labels: Sequence[int], num_classes: int, dtype: Optional[Union[str, np.dtype]] = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=np.dtype(dtype or settings.default_dtype))
    out[np.arange(labels.size), labels] = 1
    return out


def constant(data: ArrayLike, dtype: Optional[Union[str, np.dtype]] = None) -> Tensor:
    """A non-differentiable value; recorded on the active graph if there is one."""
    graph = active_graph()
    if graph is None:
        return Tensor(data, dtype=dtype)
    return graph.constant(data, dtype=dtype)


def _emit(kind: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: VJP) -> Tensor:
    if settings.check_finite and not np.all(np.isfinite(value)):
        raise NumericError(f"{kind} produced non-finite values")
    graph = active_graph()
    if graph is None:
        return Tensor(value, dtype=value.dtype)
    return graph.record(kind, inputs, value, vjp)


def _result_dtype(*tensors: Tensor) -> np.dtype:
    return np.result_type(*[t.dtype for t in tensors])


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _require_ndim(kind: str, tensor: Tensor, ndim: int, name: str) -> None:
    if len(tensor.shape) != ndim:
        raise DimensionError(kind, f"{name} must be {ndim}-D, got shape {list(tensor.shape)}")


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    _require_ndim("affine", x, 2, "input")
    _require_ndim("affine", weight, 2, "weight")
    _require_ndim("affine", bias, 1, "bias")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError("affine", f"input axis 1 ({x.shape[1]}) does not match weight axis 0 ({weight.shape[0]})")
    if bias.shape[0] != weight.shape[1]:
        raise DimensionError("affine", f"bias axis 0 ({bias.shape[0]}) does not match weight axis 1 ({weight.shape[1]})")
    xd, wd, bd = x.data, weight.data, bias.data
    dtype = _result_dtype(x, weight, bias)
    value = (xd @ wd + bd).astype(dtype, copy=False)

    def vjp(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _emit("affine", (x, weight, bias), value, vjp)


def _windows(padded: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # [n, c, h, w, kh, kw] -> [n * h * w, c * kh * kw]
    n, c = padded.shape[:2]
    view = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    h, w = view.shape[2:4]
    return view.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    _require_ndim("conv2d", x, 4, "input")
    _require_ndim("conv2d", weight, 4, "kernel")
    _require_ndim("conv2d", bias, 1, "bias")
    n, c, h, w = x.shape
    o, kc, kh, kw = weight.shape
    if kc != c:
        raise DimensionError("conv2d", f"input axis 1 ({c} channels) does not match kernel axis 1 ({kc})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("conv2d", f"kernel axes 2-3 must be odd for same padding, got {kh}x{kw}")
    if bias.shape[0] != o:
        raise DimensionError("conv2d", f"bias axis 0 ({bias.shape[0]}) does not match kernel axis 0 ({o})")
    ph, pw = kh // 2, kw // 2
    dtype = _result_dtype(x, weight, bias)
    padded = np.pad(x.data.astype(dtype, copy=False), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _windows(padded, kh, kw)
    kernel = weight.data.astype(dtype, copy=False).reshape(o, -1)
    out = cols @ kernel.T
    value = out.reshape(n, h, w, o).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    value = np.ascontiguousarray(value, dtype=dtype)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h * w, o)
        d_kernel = (g2.T @ cols).reshape(o, c, kh, kw)
        d_bias = g.sum(axis=(0, 2, 3))
        d_cols = (g2 @ kernel).reshape(n, h, w, c, kh, kw)
        d_padded = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                d_padded[:, :, i:i + h, j:j + w] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return d_padded[:, :, ph:ph + h, pw:pw + w], d_kernel, d_bias

    return _emit("conv2d", (x, weight, bias), value, vjp)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    value = np.maximum(xd, 0).astype(xd.dtype, copy=False)

    def vjp(g):
        return (g * (xd > 0),)

    return _emit("relu", (x,), value, vjp)


def maxpool2x2(x: Tensor) -> Tensor:
    _require_ndim("maxpool2x2", x, 4, "input")
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise DimensionError("maxpool2x2", f"spatial axes 2-3 must be at least 2, got {h}x{w}")
    blocks = (x.data[:, :, :2 * h2, :2 * w2]
              .reshape(n, c, h2, 2, w2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h2, w2, 4))
    winner = blocks.argmax(axis=-1)[..., None]
    value = np.take_along_axis(blocks, winner, axis=-1)[..., 0]

    def vjp(g):
        d_blocks = np.zeros_like(blocks)
        np.put_along_axis(d_blocks, winner, g[..., None], axis=-1)
        d_x = np.zeros(x.shape, dtype=g.dtype)
        d_x[:, :, :2 * h2, :2 * w2] = (d_blocks.reshape(n, c, h2, w2, 2, 2)
                                       .transpose(0, 1, 2, 4, 3, 5)
                                       .reshape(n, c, 2 * h2, 2 * w2))
        return (d_x,)

    return _emit("maxpool2x2", (x,), value, vjp)


def flatten(x: Tensor) -> Tensor:
    if len(x.shape) < 2:
        raise DimensionError("flatten", f"input must have a batch axis, got shape {list(x.shape)}")
    shape = x.shape
    value = x.data.reshape(shape[0], -1)

    def vjp(g):
        return (g.reshape(shape),)

    return _emit("flatten", (x,), value, vjp)


def softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), s, vjp)


def log(x: Tensor, floor: Optional[float] = None) -> Tensor:
    xd = x.data
    if floor is None:
        if np.any(xd <= 0):
            raise NumericError("log: input must be strictly positive (pass a floor to clamp)")
        clamped = xd
        live = None
    else:
        clamped = np.maximum(xd, floor)
        live = xd >= floor
    value = np.log(clamped)

    def vjp(g):
        grad = g / clamped
        return (grad if live is None else grad * live,)

    return _emit("log", (x,), value, vjp)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    try:
        value = np.add(a.data, b.data)
    except ValueError as e:
        raise DimensionError("add", f"cannot broadcast {list(a.shape)} with {list(b.shape)}") from e

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), value, vjp)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    try:
        value = np.multiply(ad, bd)
    except ValueError as e:
        raise DimensionError("mul", f"cannot broadcast {list(a.shape)} with {list(b.shape)}") from e

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _emit("mul", (a, b), value, vjp)


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    b = _as_tensor(b)
    return _as_tensor(a, like=b), b


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = x.shape
    value = np.sum(x.data, axis=axis)
    if axis is None:
        value = np.reshape(value, (1,))

    def vjp(g):
        grad = g.reshape(()) if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(grad, shape).astype(x.dtype),)

    return _emit("reduce-sum", (x,), np.asarray(value, dtype=x.dtype), vjp)


def reduce_mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = x.shape
    count = x.size if axis is None else shape[axis]
    value = np.mean(x.data, axis=axis)
    if axis is None:
        value = np.reshape(value, (1,))

    def vjp(g):
        grad = g.reshape(()) if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(grad / count, shape).astype(x.dtype),)

    return _emit("reduce-mean", (x,), np.asarray(value, dtype=x.dtype), vjp)


def _reduce_rows(kind: str, per_row: np.ndarray, reduction: str, dtype: np.dtype):
    if reduction not in REDUCTIONS:
        raise ContractError(f"{kind}: reduction must be one of {REDUCTIONS}, got {reduction!r}")
    n = per_row.shape[0]
    if reduction == "none":
        return per_row.astype(dtype), lambda g: g[:, None]
    if reduction == "sum":
        return np.asarray([per_row.sum()], dtype=dtype), lambda g: np.full((n, 1), g.reshape(()), dtype=dtype)
    return np.asarray([per_row.mean()], dtype=dtype), lambda g: np.full((n, 1), g.reshape(()) / n, dtype=dtype)


def _check_pair(kind: str, probs: Tensor, target: Tensor) -> None:
    _require_ndim(kind, probs, 2, "prediction")
    if probs.shape != target.shape:
        raise DimensionError(kind, f"prediction shape {list(probs.shape)} does not match target {list(target.shape)}")


def cross_entropy(probs: Tensor, target: ArrayLike, reduction: str = "mean") -> Tensor:
    """-sum_c target_c * log(max(probs_c, 1e-12)) per row; the target gets no gradient."""
    target = _as_tensor(target, like=probs)
    _check_pair("cross-entropy", probs, target)
    p, t = probs.data, target.data
    clamped = np.maximum(p, LOG_FLOOR)
    per_row = -(t * np.log(clamped)).sum(axis=1)
    value, expand = _reduce_rows("cross-entropy", per_row, reduction, probs.dtype)

    def vjp(g):
        return -expand(g) * t / clamped * (p >= LOG_FLOOR), None

    return _emit("cross-entropy", (probs, target), value, vjp)


def kl_div(target: ArrayLike, probs: Tensor, reduction: str = "mean") -> Tensor:
    """sum_c p_c (log p_c - log max(q_c, 1e-12)) per row with 0 log 0 = 0; p gets no gradient."""
    target = _as_tensor(target, like=probs)
    _check_pair("kl-div", probs, target)
    p, q = target.data, probs.data
    clamped = np.maximum(q, LOG_FLOOR)
    support = p > 0
    log_p = np.log(np.where(support, p, 1.0))
    per_row = np.where(support, p * (log_p - np.log(clamped)), 0.0).sum(axis=1)
    value, expand = _reduce_rows("kl-div", per_row, reduction, probs.dtype)

    def vjp(g):
        return None, -expand(g) * p / clamped * (q >= LOG_FLOOR)

    return _emit("kl-div", (target, probs), value, vjp)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def backward(root: Tensor, leaves: Optional[Sequence[Tensor]] = None) -> Dict[int, Tensor]:
    """Gradients of a scalar root with respect to graph leaves, keyed by node id.

    ``leaves`` defaults to every leaf registered with :meth:`Graph.leaf`.
    Leaves the root does not depend on get a zero tensor.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {list(root.shape)}")
    graph = root.graph
    if graph is None:
        raise ContractError("backward root was not recorded on a graph")

    grads: Dict[int, np.ndarray] = {root.node_id: np.ones(root.shape, dtype=root.dtype)}
    for node in reversed(graph.nodes[:root.node_id + 1]):
        upstream = grads.get(node.id)
        if upstream is None or node.vjp is None:
            continue
        for input_id, grad in zip(node.inputs, node.vjp(upstream)):
            if grad is None:
                continue
            grads[input_id] = grads[input_id] + grad if input_id in grads else grad

    if leaves is None:
        wanted = list(graph.roots)
    else:
        wanted = []
        for leaf in leaves:
            if leaf.graph is not graph:
                raise ContractError(f"{leaf!r} does not belong to the root's graph")
            wanted.append(leaf.node_id)

    result: Dict[int, Tensor] = {}
    for node_id in wanted:
        output = graph.nodes[node_id].output
        grad = grads.get(node_id)
        if grad is None:
            grad = np.zeros(output.shape, dtype=output.dtype)
        result[node_id] = Tensor(np.reshape(grad, output.shape), dtype=output.dtype)
    return result


def numerical_gradient(fn: Callable[[np.ndarray], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function."""
    base = np.array(array, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        upper = fn(base)
        flat[i] = saved - h
        lower = fn(base)
        flat[i] = saved
        out[i] = (upper - lower) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error between two gradients."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(np.asarray(analytic) - np.asarray(numeric)), initial=0.0)) / scale
