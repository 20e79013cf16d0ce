"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation builds a node holding its parents and a closure
that pushes the output gradient back into them. ``Tensor.backward`` sorts the
graph topologically and runs those closures once each, in reverse.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True
        self.tapes: list = []
        self.mac_counters: list = []


_state = _State()


def default_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


class GradTape:
    """Records every graph node created while active, in execution order.

    Used for inspection only; backward does its own traversal from the loss.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.remove(self)
        return False

    def ids(self) -> set[int]:
        return {id(n) for n in self.nodes}

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


class MacCounter:
    """Counts multiply-accumulates executed by conv2d and matmul."""

    def __init__(self):
        self.macs = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int):
        self.macs += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)

    def __enter__(self):
        _state.mac_counters.append(self)
        return self

    def __exit__(self, *exc):
        _state.mac_counters.remove(self)
        return False


def _count_macs(op: str, n: int):
    for c in _state.mac_counters:
        c.add(op, n)


def _check_finite(arr: np.ndarray, op: str, where: str = "forward"):
    # a non-finite sum means a non-finite element (or overflow, equally fatal)
    if not np.isfinite(np.add.reduce(arr, axis=None)):
        raise NonFiniteError(f"non-finite values produced by {op} ({where})")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_prev", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state.dtype)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._prev: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match {self.data.shape} for {self.op}")
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self):
        if self.data.size != 1 or self.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                for p in node._prev:
                    if p.grad is not None:
                        _check_finite(p.grad, node.op, "backward")

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
        for tape in _state.tapes:
            tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    b = _lift(b, a)

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    b = _lift(b, a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    b = _lift(b, a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data ** a.data.dtype.type(exponent)

    def bw(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _result(out, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError instead
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: a._accumulate(g * out), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: a._accumulate(g / a.data), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.data.dtype), (a,),
                   lambda g: a._accumulate(g * mask), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: a._accumulate(g * s * (1 - s)), "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s

    def bw(g):
        a._accumulate(g * (s * (1 + a.data * (1 - s))))

    return _result(out, (a,), bw, "silu")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: a._accumulate(g * (1 - t * t)), "tanh")


ACTIVATIONS = {"relu": relu, "silu": silu, "tanh": tanh, "sigmoid": sigmoid}


# -- reductions and shape -----------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(np.asarray(out, dtype=a.data.dtype), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g / count, a.shape))

    return _result(np.asarray(out, dtype=a.data.dtype), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,),
                   lambda g: a._accumulate(np.transpose(g, inv)), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(part)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# -- linear algebra -------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape[1]} vs {b.shape[0]}")
    _count_macs("matmul", a.shape[0] * a.shape[1] * b.shape[1])

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias, with weight stored as (out, in)."""
    out = matmul(x, transpose(weight))
    return out + bias if bias is not None else out


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be B x C x H x W, got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be Cout x Cin x K x K, got {weight.shape}")
    B, C, H, W = x.shape
    Cout, Cin, K, _ = weight.shape
    if Cin != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C} channels, weight expects Cin={Cin}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d bias must have shape ({Cout},), got {bias.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if K > H + 2 * padding or K > W + 2 * padding:
        raise ShapeError(f"conv2d kernel {K} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    Ho = conv_output_size(H, K, stride, padding)
    Wo = conv_output_size(W, K, stride, padding)
    _count_macs("conv2d", B * Cout * Ho * Wo * Cin * K * K)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, ::stride, ::stride]  # B,C,Ho,Wo,K,K
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * K * K)
    wmat = weight.data.reshape(Cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
        if weight.requires_grad:
            weight._accumulate((gmat.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(B, Ho, Wo, C, K, K)
            gxp = np.zeros(xp.shape, dtype=x.data.dtype)
            for i in range(K):
                for j in range(K):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding:padding + H, padding:padding + W]
            x._accumulate(gxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects B x C x H x W, got {x.shape}")
    B, C, H, W = x.shape
    if H < 1 or W < 1:
        raise ShapeError("global_avg_pool needs H, W >= 1")

    def bw(g):
        x._accumulate(np.broadcast_to((g / (H * W))[:, :, None, None], x.shape))

    return _result(x.data.mean(axis=(2, 3)), (x,), bw, "global_avg_pool")


def batchnorm(x: Tensor, running_mean: Tensor, running_var: Tensor,
              gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Batch normalization with frozen statistics, over axis 1."""
    C = x.shape[1]
    for t, n in ((running_mean, "running_mean"), (running_var, "running_var"), (gamma, "gamma"), (beta, "beta")):
        if t.shape != (C,):
            raise ShapeError(f"batchnorm {n} must have shape ({C},), got {t.shape}")
    bshape = (1, C) + (1,) * (x.ndim - 2)
    inv = (1.0 / np.sqrt(running_var.data + eps)).astype(x.data.dtype)
    xhat = (x.data - running_mean.data.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    axes = tuple(i for i in range(x.ndim) if i != 1)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * (gamma.data * inv).reshape(bshape))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))

    return _result(out, (x, gamma, beta), bw, "batchnorm")


def standardize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """(x - mean) / (std + eps) along the last axis; population std."""
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    s = np.sqrt((xc * xc).mean(axis=-1, keepdims=True))
    d = s + eps
    out = xc / d

    def bw(g):
        gxc = g / d
        gd = -(g * xc).sum(axis=-1, keepdims=True) / (d * d)
        safe_s = np.where(s > 0, s, 1)
        gxc = gxc + gd * np.where(s > 0, xc / (n * safe_s), 0)
        x._accumulate(gxc - gxc.mean(axis=-1, keepdims=True))

    return _result(out, (x,), bw, "standardize")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy with integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"cross_entropy: labels outside [0, {logits.shape[1]})")
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        logits._accumulate(g * p / n)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw, "cross_entropy")


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]


def graph_nodes(root: Tensor) -> list[Tensor]:
    """All nodes reachable from ``root`` through parent links (including leaves)."""
    out, seen, stack = [], set(), [root]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        out.append(n)
        stack.extend(n._prev)
    return out
