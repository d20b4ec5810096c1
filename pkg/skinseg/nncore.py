"""Dense tensors, reverse-mode autodiff and optimisation for small U-Nets.

Tensors are NumPy arrays shaped ``(C, H, W)`` or batched ``(N, C, H, W)``.
The functional ops below accept either layout; the :class:`Graph` tape
always works on batched arrays.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from .const import ADAM_BETAS, ADAM_EPS, DEFAULT_LR
from .errors import (
    ChannelMismatchError,
    ContractError,
    GraphError,
    NonFiniteError,
    ShapeMismatchError,
)

_LOGGER = logging.getLogger(__name__)

Tensor = npt.NDArray[np.floating[Any]]
Objective = Callable[[Tensor], tuple[float, Tensor]]


def _check_finite(op: str, array: Tensor) -> Tensor:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{op} produced or received NaN/Inf values")
    return array


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x[np.newaxis], True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatchError(f"expected a (C,H,W) or (N,C,H,W) tensor, got {x.shape}")


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return x[0] if squeeze else x


# ---------------------------------------------------------------------------
# Functional ops


def _im2col(x: Tensor, size: int) -> Tensor:
    """Return (N*H*W, C*k*k) zero-padded sliding windows of a batch."""
    n, c, h, w = x.shape
    pad = size // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (size, size), axis=(2, 3))
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * size * size)


def _conv2d_batch(x: Tensor, kernel: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    out_c, in_c, size, size_w = kernel.shape
    if size != size_w or size % 2 == 0:
        raise ContractError(f"kernels must be square with odd size, got {kernel.shape}")
    if x.shape[1] != in_c:
        raise ChannelMismatchError(f"conv2d expects {in_c} input channels, got {x.shape[1]}")
    if bias.shape != (out_c,):
        raise ShapeMismatchError(f"bias shape {bias.shape} does not match {out_c} outputs")
    n, _, h, w = x.shape
    cols = _im2col(x, size)
    out = cols @ kernel.reshape(out_c, -1).T + bias
    return out.reshape(n, h, w, out_c).transpose(0, 3, 1, 2), cols


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padded, stride-1 cross-correlation plus bias."""
    batch, squeeze = _batched(x)
    out, _ = _conv2d_batch(batch, kernel, bias)
    return _unbatched(_check_finite("conv2d", out), squeeze)


def conv2d_backward(
    grad: Tensor, x_shape: tuple[int, ...], kernel: Tensor, cols: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """Return gradients with respect to input, kernel and bias."""
    n, c, h, w = x_shape
    out_c, _, size, _ = kernel.shape
    pad = size // 2
    flat = grad.transpose(0, 2, 3, 1).reshape(-1, out_c)
    d_kernel = (flat.T @ cols).reshape(kernel.shape)
    d_bias = flat.sum(axis=0)
    d_cols = (flat @ kernel.reshape(out_c, -1)).reshape(n, h, w, c, size, size)
    d_padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad.dtype)
    for i in range(size):
        for j in range(size):
            d_padded[:, :, i : i + h, j : j + w] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return d_padded[:, :, pad : pad + h, pad : pad + w], d_kernel, d_bias


def _pool_windows(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"maxpool2 needs even dimensions, got {h}x{w}")
    return (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )


def _maxpool2_batch(x: Tensor) -> tuple[Tensor, npt.NDArray[np.intp]]:
    windows = _pool_windows(x)
    # argmax returns the first maximum, i.e. the first cell in row-major order
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., np.newaxis], axis=-1)[..., 0]
    return out, arg


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling."""
    batch, squeeze = _batched(x)
    out, _ = _maxpool2_batch(batch)
    return _unbatched(out, squeeze)


def maxpool2_backward(grad: Tensor, arg: npt.NDArray[np.intp], x_shape: tuple[int, ...]) -> Tensor:
    """Route each pooled gradient to the winning cell of its window."""
    n, c, h, w = x_shape
    windows = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
    np.put_along_axis(windows, arg[..., np.newaxis], grad[..., np.newaxis], axis=-1)
    return (
        windows.reshape(n, c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def upsample2_backward(grad: Tensor) -> Tensor:
    """Sum the gradient over the four replicas of every input cell."""
    *lead, h, w = grad.shape
    return grad.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along channels, a first."""
    if a.shape[-2:] != b.shape[-2:] or a.ndim != b.ndim:
        raise ShapeMismatchError(f"cannot concatenate {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=-3)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    return np.maximum(x, 0)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function, strictly inside (0, 1).

    Saturated outputs are clipped to the nearest representable values of the
    input's floating dtype.
    """
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.dtype(np.float64)
    decay = np.exp(-np.abs(x.astype(dtype)))
    out = np.where(x >= 0, 1.0 / (1.0 + decay), decay / (1.0 + decay)).astype(dtype)
    low = np.nextafter(dtype.type(0), dtype.type(1))
    high = np.nextafter(dtype.type(1), dtype.type(0))
    return np.clip(out, low, high)


# ---------------------------------------------------------------------------
# Parameters


class ParamStore:
    """Named learnable arrays (weights and biases per layer)."""

    def __init__(self, slots: Mapping[str, Tensor] | None = None) -> None:
        """Initialize the store from an optional mapping of slot arrays."""
        self._slots: dict[str, Tensor] = {}
        for name, array in (slots or {}).items():
            self.add(name, array)

    def add(self, name: str, array: Tensor) -> None:
        """Register a new slot."""
        if name in self._slots:
            raise ContractError(f"duplicate parameter slot {name!r}")
        self._slots[name] = np.asarray(array)

    def __getitem__(self, name: str) -> Tensor:
        return self._slots[name]

    def __setitem__(self, name: str, array: Tensor) -> None:
        if name in self._slots and self._slots[name].shape != np.shape(array):
            raise ShapeMismatchError(
                f"slot {name!r} has shape {self._slots[name].shape}, got {np.shape(array)}"
            )
        self._slots[name] = np.asarray(array)

    def __contains__(self, name: object) -> bool:
        return name in self._slots

    def __iter__(self) -> Iterator[str]:
        return iter(self._slots)

    def __len__(self) -> int:
        return len(self._slots)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        """Iterate over (name, array) pairs in registration order."""
        return iter(self._slots.items())

    @property
    def total_count(self) -> int:
        """Return the number of scalar parameters."""
        return sum(int(array.size) for array in self._slots.values())

    def copy(self) -> ParamStore:
        """Return a deep copy."""
        return ParamStore({name: array.copy() for name, array in self._slots.items()})

    def astype(self, dtype: npt.DTypeLike) -> ParamStore:
        """Return a copy with every slot cast to dtype."""
        return ParamStore({name: array.astype(dtype) for name, array in self._slots.items()})

    def zeros_like(self) -> ParamStore:
        """Return a store of zeros with the same slots."""
        return ParamStore({name: np.zeros_like(array) for name, array in self._slots.items()})

    def equals(self, other: ParamStore) -> bool:
        """Return True if both stores hold bitwise-identical slots."""
        return list(self) == list(other) and all(
            self[name].dtype == other[name].dtype and np.array_equal(self[name], other[name])
            for name in self
        )


# ---------------------------------------------------------------------------
# Graph tape


@dataclass(slots=True)
class Node:
    """One recorded operation."""

    op: str
    inputs: tuple[int, ...] = ()
    slot: str | None = None
    data: Any = None
    value: Tensor | None = None
    cache: Any = None


class Graph:
    """A re-executable tape of tensor operations with a single scalar sink.

    Operations are evaluated eagerly as they are recorded. :meth:`forward`
    replays the tape with new parameters; :func:`backward` consumes the
    cached activations of the latest forward pass.
    """

    def __init__(self, params: ParamStore, dtype: npt.DTypeLike = np.float32) -> None:
        """Initialize an empty tape bound to a parameter store."""
        self.params = params
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self._sink: int | None = None
        self._fresh = False

    # recording -------------------------------------------------------------

    def _record(self, node: Node) -> int:
        if self._sink is not None:
            raise GraphError("the graph already has a scalar sink")
        for index in node.inputs:
            if not 0 <= index < len(self.nodes):
                raise GraphError(f"input node {index} does not precede its consumer")
        self.nodes.append(node)
        self._evaluate(node)
        self._fresh = True
        return len(self.nodes) - 1

    def input(self, array: Tensor) -> int:
        """Record a constant input tensor."""
        batch, _ = _batched(np.asarray(array))
        return self._record(Node("input", data=batch))

    def param(self, slot: str) -> int:
        """Record a read of a parameter slot."""
        if slot not in self.params:
            raise GraphError(f"unknown parameter slot {slot!r}")
        return self._record(Node("param", slot=slot))

    def conv2d(self, x: int, kernel: int, bias: int) -> int:
        """Record a same-padded convolution."""
        return self._record(Node("conv2d", (x, kernel, bias)))

    def maxpool2(self, x: int) -> int:
        """Record 2x2 max pooling."""
        return self._record(Node("maxpool2", (x,)))

    def upsample2(self, x: int) -> int:
        """Record 2x nearest-neighbour upsampling."""
        return self._record(Node("upsample2", (x,)))

    def concat(self, a: int, b: int) -> int:
        """Record channel concatenation."""
        return self._record(Node("concat", (a, b)))

    def relu(self, x: int) -> int:
        """Record a rectifier."""
        return self._record(Node("relu", (x,)))

    def sigmoid(self, x: int) -> int:
        """Record a logistic activation."""
        return self._record(Node("sigmoid", (x,)))

    def sum(self, x: int) -> int:
        """Record the sum of a tensor as the scalar sink."""
        sink = self._record(Node("sum", (x,)))
        self._sink = sink
        return sink

    def loss(self, x: int, objective: Objective) -> int:
        """Record an objective as the scalar sink.

        Args:
            x: Node whose value is scored.
            objective: Returns ``(value, d value / d x)`` for a tensor.
        """
        sink = self._record(Node("loss", (x,), data=objective))
        self._sink = sink
        return sink

    def value(self, node: int) -> Tensor:
        """Return the cached activation of a node."""
        value = self.nodes[node].value
        if value is None:
            raise GraphError(f"node {node} has no cached value")
        return value

    @property
    def loss_value(self) -> float:
        """Return the value of the scalar sink."""
        if self._sink is None:
            raise GraphError("the graph has no scalar sink")
        return float(self.value(self._sink))

    # evaluation ------------------------------------------------------------

    def _evaluate(self, node: Node) -> None:
        args = [self.nodes[i].value for i in node.inputs]
        op = node.op
        if op == "input":
            node.value = node.data.astype(self.dtype, copy=False)
        elif op == "param":
            node.value = np.asarray(self.params[node.slot], dtype=self.dtype)
        elif op == "conv2d":
            node.value, node.cache = _conv2d_batch(args[0], args[1], args[2])
        elif op == "maxpool2":
            node.value, node.cache = _maxpool2_batch(args[0])
        elif op == "upsample2":
            node.value = upsample2(args[0])
        elif op == "concat":
            node.value = concat_channels(args[0], args[1])
        elif op == "relu":
            node.value = relu(args[0])
        elif op == "sigmoid":
            node.value = sigmoid(args[0])
        elif op == "sum":
            node.value = np.asarray(args[0].sum(), dtype=self.dtype)
        elif op == "loss":
            value, grad = node.data(args[0])
            node.value = np.asarray(value, dtype=np.float64)
            node.cache = np.asarray(grad)
        else:
            raise GraphError(f"unknown op {op!r}")
        _check_finite(op, node.value)

    def forward(self, params: ParamStore | None = None, dtype: npt.DTypeLike | None = None) -> float | None:
        """Replay the tape, optionally with new parameters or precision.

        Returns:
            The sink value, or None if the graph has no sink.
        """
        if params is not None:
            self.params = params
        if dtype is not None:
            self.dtype = np.dtype(dtype)
        for node in self.nodes:
            self._evaluate(node)
        self._fresh = True
        return None if self._sink is None else self.loss_value

    def _backward_node(self, node: Node, grad: Tensor) -> tuple[Tensor, ...]:
        args = [self.nodes[i].value for i in node.inputs]
        op = node.op
        if op == "conv2d":
            return conv2d_backward(grad, args[0].shape, args[1], node.cache)
        if op == "maxpool2":
            return (maxpool2_backward(grad, node.cache, args[0].shape),)
        if op == "upsample2":
            return (upsample2_backward(grad),)
        if op == "concat":
            split = args[0].shape[1]
            return grad[:, :split], grad[:, split:]
        if op == "relu":
            return (grad * (args[0] > 0),)
        if op == "sigmoid":
            out = node.value
            return (grad * out * (1 - out),)
        if op == "sum":
            return (np.broadcast_to(grad, args[0].shape).astype(self.dtype),)
        if op == "loss":
            return ((grad * node.cache).astype(self.dtype),)
        return ()

    def backward(self, params: ParamStore | None = None) -> ParamStore:
        """Return parameter gradients of the sink; see :func:`backward`."""
        return backward(self, self.params if params is None else params)


def backward(graph: Graph, params: ParamStore) -> ParamStore:
    """Reverse-mode accumulation from the scalar sink to every parameter.

    Raises:
        GraphError: No sink, or no fresh forward pass since the last call.
    """
    if graph._sink is None:
        raise GraphError("backward needs a scalar sink")
    if not graph._fresh:
        raise GraphError("backward called twice without a new forward pass")
    grads: list[Tensor | None] = [None] * len(graph.nodes)
    grads[graph._sink] = np.ones((), dtype=graph.dtype)
    result = params.zeros_like()
    for index in range(graph._sink, -1, -1):
        grad = grads[index]
        if grad is None:
            continue
        node = graph.nodes[index]
        if node.op == "param":
            result[node.slot] = result[node.slot] + grad.astype(result[node.slot].dtype)
            continue
        for source, source_grad in zip(node.inputs, graph._backward_node(node, grad), strict=True):
            _check_finite(f"{node.op} backward", source_grad)
            previous = grads[source]
            grads[source] = source_grad if previous is None else previous + source_grad
    graph._fresh = False
    return result


# ---------------------------------------------------------------------------
# Optimisation


@dataclass
class AdamState:
    """First and second moment estimates plus the step counter."""

    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ParamStore,
    grads: ParamStore,
    state: AdamState,
    lr: float = DEFAULT_LR,
    betas: tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
    t: int | None = None,
) -> tuple[ParamStore, AdamState]:
    """Apply one bias-corrected Adam update in place.

    Args:
        t: Step number (>= 1); defaults to the state's counter plus one.
    """
    step = state.t + 1 if t is None else t
    if step < 1:
        raise ContractError(f"Adam step must be >= 1, got {step}")
    beta1, beta2 = betas
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise ShapeMismatchError(
                f"gradient for {name!r} has shape {grad.shape}, expected {param.shape}"
            )
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * grad if m is None else beta1 * m + (1 - beta1) * grad
        v = (1 - beta2) * grad * grad if v is None else beta2 * v + (1 - beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1**step)
        v_hat = v / (1 - beta2**step)
        param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)
    state.t = step
    return params, state


# ---------------------------------------------------------------------------
# Verification


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    max_rel_error: float
    checked: int
    tolerance: float
    worst_slot: str | None

    @property
    def passed(self) -> bool:
        """Return True if every checked coordinate is within tolerance."""
        return self.max_rel_error < self.tolerance


def grad_check(
    graph: Graph,
    params: ParamStore,
    tolerance: float,
    *,
    samples: int = 200,
    seed: int = 0,
    step: float = 1e-5,
    floor: float = 1e-10,
) -> GradCheckReport:
    """Compare analytic gradients with central differences in double precision.

    Coordinates are sampled without replacement; each uses a step of
    ``step * (1 + |theta|)``. Coordinates whose analytic and numeric
    gradients are both below ``floor`` count as exact.

    The graph is replayed with its original parameters and precision before
    returning.
    """
    original_params, original_dtype = graph.params, graph.dtype
    params64 = params.astype(np.float64)
    graph.forward(params64, dtype=np.float64)
    analytic = backward(graph, params64)

    names = list(params64)
    sizes = np.array([params64[name].size for name in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(int(offsets[-1]), size=min(samples, int(offsets[-1])), replace=False)

    worst, worst_slot = 0.0, None
    for pick in np.sort(picks):
        slot_index = int(np.searchsorted(offsets, pick, side="right") - 1)
        name = names[slot_index]
        flat = params64[name].reshape(-1)
        coord = int(pick - offsets[slot_index])
        theta = flat[coord]
        h = step * (1.0 + abs(theta))
        flat[coord] = theta + h
        upper = graph.forward(params64)
        flat[coord] = theta - h
        lower = graph.forward(params64)
        flat[coord] = theta
        if upper is None or lower is None:
            raise GraphError("grad_check needs a graph with a scalar sink")
        numeric = (upper - lower) / (2.0 * h)
        exact = float(analytic[name].reshape(-1)[coord])
        scale = max(abs(exact), abs(numeric))
        error = 0.0 if scale < floor else abs(exact - numeric) / scale
        if error > worst:
            worst, worst_slot = error, name
    graph.forward(original_params, dtype=original_dtype)
    report = GradCheckReport(
        max_rel_error=worst, checked=len(picks), tolerance=tolerance, worst_slot=worst_slot
    )
    _LOGGER.debug("Gradient check: %s", report)
    return report
