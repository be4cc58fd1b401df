"""Float64 tensors with tape-based reverse-mode autodiff on a numpy backend.

Every op records its parents and a closure mapping the output gradient to one
gradient per parent. ``backward`` walks the recorded graph in reverse
topological order; leaf tensors with ``requires_grad`` accumulate into ``.grad``.

Live tensor bytes are tracked by :data:`memory` so training runs can report a
hardware-independent peak-memory figure.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
MASK_VALUE = -1e9  # exp(MASK_VALUE - max) underflows to exactly 0.0 in float64

GELU_C = math.sqrt(2.0 / math.pi)


class NonFiniteError(FloatingPointError):
    """A forward or backward computation produced NaN or Inf."""

    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite value in {where} of '{op}'")
        self.op = op
        self.where = where


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical seeds give identical draws on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


class MemoryTracker:
    """Counts bytes held by live tensors, leaf gradients and optimizer state.

    Process-global; one training run per process is assumed when reading it.
    """

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0

    def allocate(self, nbytes: int) -> None:
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def release(self, nbytes: int) -> None:
        self.live -= nbytes

    def reset(self) -> None:
        """Start a new measurement window; the peak restarts at current usage."""
        self.peak = self.live

    def peak_bytes(self) -> int:
        return self.peak


memory = MemoryTracker()


def memory_proxy() -> int:
    """Peak concurrently-live tensor bytes since the last ``memory.reset()``."""
    return memory.peak_bytes()


def _owned_bytes(arr: np.ndarray) -> int:
    # views share their base's buffer and are not counted twice
    return arr.nbytes if arr.base is None else 0


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "op", "_nbytes", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = op
        self._nbytes = _owned_bytes(arr)
        memory.allocate(self._nbytes)

    def __del__(self):
        memory.release(self._nbytes)
        if self._grad is not None:
            memory.release(self._grad.nbytes)

    @property
    def grad(self) -> np.ndarray | None:
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray | None) -> None:
        if self._grad is not None:
            memory.release(self._grad.nbytes)
        self._grad = value
        if value is not None:
            memory.allocate(value.nbytes)

    def zero_grad(self) -> None:
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, op="detach")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _check_finite(arr: np.ndarray, op: str, where: str = "forward") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(op, where)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _record(a.data + b.data, (a, b), _bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _record(a.data * b.data, (a, b), _bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def _bw(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _record(out, (x,), _bw, "gelu")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: Bernoulli keep-mask scaled by 1/(1-p); identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p) * (1.0 / (1.0 - p))
    return _record(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replace entries where ``mask`` is True (broadcast against x) by ``value``."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return _record(np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def index_select(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""

    def _bw(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(x.data[index]), (x,), _bw, "index")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")

    def _bw(g):
        full = np.zeros(weight.shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _record(weight.data[ids], (weight,), _bw, "embedding")


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(out), (x,), _bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def _bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), _bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [d_out, d_in]."""
    out = matmul(x, transpose(weight))
    return add(out, bias) if bias is not None else out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def _bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), _bw, "layer_norm")


# ---------------------------------------------------------------------------
# softmax family


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``x / temperature`` (max-subtracted)."""
    _check_temperature(temperature)
    z = x.data / temperature
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return ((s * (g - (g * s).sum(axis=-1, keepdims=True))) / temperature,)

    return _record(s, (x,), _bw, "softmax")


def log_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    _check_temperature(temperature)
    out = _log_softmax_np(x.data / temperature)

    def _bw(g):
        s = np.exp(out)
        return ((g - s * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _record(out, (x,), _bw, "log_softmax")


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"expected logits [B, C] and B labels, got {logits.shape} and {labels.shape}")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    logp = log_softmax(logits)
    picked = index_select(logp, (np.arange(labels.size), labels))
    return neg(mean(picked))


def kl_divergence(p_logits, q_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Batch-mean KL(p || q) of the tempered softmaxes; p is treated as a constant.

    Only ``q_logits`` receives gradient; ``p_logits`` may be a Tensor or array.
    """
    _check_temperature(temperature)
    p_arr = p_logits.data if isinstance(p_logits, Tensor) else np.asarray(p_logits, dtype=DTYPE)
    if p_arr.shape != q_logits.shape:
        raise ValueError(f"shape mismatch: {p_arr.shape} vs {q_logits.shape}")
    log_p = _log_softmax_np(p_arr / temperature)
    p = np.exp(log_p)
    log_q = log_softmax(q_logits, temperature)
    # sum_i p_i (log p_i - log q_i), batch-mean
    per_row = tsum(mul(Tensor(p), add(Tensor(log_p), neg(log_q))), axis=-1)
    return mean(per_row)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    memory.allocate(loss.data.nbytes)
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        memory.release(g.nbytes)
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        del g
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, node.op, "backward")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                pg = np.array(pg, dtype=DTYPE)
                grads[key] = pg
                memory.allocate(pg.nbytes)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
