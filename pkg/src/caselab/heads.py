"""Task-specific classification heads fitted on cached context embeddings."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import tensor as T
from .optim import Adam, LinearSchedule
from .tensor import Tensor


@dataclass(frozen=True)
class EmbeddingBuffer:
    """Context embeddings and labels for one task; read-only once built."""

    z: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        z = np.array(self.z, copy=True)
        y = np.array(self.y, dtype=np.int64, copy=True)
        if z.ndim != 2 or len(z) != len(y):
            raise ValueError(f"buffer needs N x D embeddings and N labels, got {z.shape} and {y.shape}")
        z.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return len(self.y)

    @property
    def way(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    @property
    def dim(self) -> int:
        return self.z.shape[1]


@dataclass
class LinearHead:
    weight: np.ndarray  # way x D
    bias: np.ndarray  # way

    @classmethod
    def zeros(cls, way: int, dim: int, dtype=np.float32) -> "LinearHead":
        return cls(np.zeros((way, dim), dtype=dtype), np.zeros(way, dtype=dtype))

    @property
    def way(self) -> int:
        return self.weight.shape[0]

    def logits(self, z: Tensor) -> Tensor:
        """Differentiable logits w.r.t. ``z``; the head itself enters as constants."""
        return T.linear(z, Tensor(self.weight), Tensor(self.bias))


@dataclass
class ProtoHead:
    prototypes: np.ndarray  # way x D


@dataclass
class MahalanobisHead:
    means: np.ndarray  # way x D
    covariances: np.ndarray  # way x D x D, regularized
    task_covariance: np.ndarray
    lambdas: np.ndarray

    def __post_init__(self):
        self._factors = [cho_factor(c, lower=True) for c in self.covariances]

    def squared_distances(self, z: np.ndarray) -> np.ndarray:
        out = np.empty((len(z), len(self.means)))
        for k, (mu, fac) in enumerate(zip(self.means, self._factors)):
            diff = (z - mu).astype(np.float64)
            sol = cho_solve(fac, diff.T)
            out[:, k] = np.einsum("ij,ji->i", diff, sol)
        return out


def fit_head(buffer: EmbeddingBuffer, steps: int = 500, batch_size: int = 128,
             lr_schedule: Optional[Callable[[int], float]] = None, rng: Optional[np.random.Generator] = None,
             way: Optional[int] = None) -> LinearHead:
    """Fit a zero-initialized linear head by Adam on mini-batches drawn with replacement.

    Only the buffer is touched: the body is never evaluated here.
    """
    way = way or buffer.way
    head = LinearHead.zeros(way, buffer.dim, buffer.z.dtype)
    if steps <= 0 or len(buffer) == 0:
        return head
    rng = rng if rng is not None else np.random.default_rng(0)
    sched = lr_schedule or LinearSchedule(1e-3, 1e-5, steps)
    w = Tensor(head.weight, requires_grad=True, name="head.weight")
    b = Tensor(head.bias, requires_grad=True, name="head.bias")
    opt = Adam([w, b])
    z, n = buffer.z, len(buffer)
    onehot = np.eye(way, dtype=z.dtype)[buffer.y]
    for step in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        # A batch drawn with replacement only matters through how often each
        # buffer row was picked, so the cross-entropy gradient is evaluated on
        # the (small) buffer and weighted by those counts.
        counts = np.bincount(idx, minlength=n).astype(z.dtype) / batch_size
        logits = z @ w.data.T + b.data
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) * counts[:, None]
        w.grad, b.grad = g.T @ z, g.sum(axis=0)
        opt.step(sched(step))
    return LinearHead(w.data.copy(), b.data.copy())


def _covariance(z: np.ndarray) -> np.ndarray:
    if len(z) < 2:
        return np.zeros((z.shape[1], z.shape[1]))
    return np.cov(z, rowvar=False, ddof=1).reshape(z.shape[1], z.shape[1])


def fit_mahalanobis(buffer: EmbeddingBuffer, ridge: float = 1.0) -> MahalanobisHead:
    """Class means plus shrunk class covariances ``l*S_k + (1-l)*S + ridge*I`` with l = N_k/(N_k+1)."""
    z = buffer.z.astype(np.float64)
    way, d = buffer.way, buffer.dim
    task_cov = _covariance(z)
    means, covs, lams = [], [], []
    for k in range(way):
        zk = z[buffer.y == k]
        if len(zk) == 0:
            raise ValueError(f"class {k} has no context examples")
        lam = len(zk) / (len(zk) + 1.0)
        means.append(zk.mean(axis=0))
        covs.append(lam * _covariance(zk) + (1 - lam) * task_cov + ridge * np.eye(d))
        lams.append(lam)
    return MahalanobisHead(np.array(means), np.array(covs), task_cov, np.array(lams))


def fit_proto(buffer: EmbeddingBuffer) -> ProtoHead:
    protos = []
    for k in range(buffer.way):
        zk = buffer.z[buffer.y == k]
        if len(zk) == 0:
            raise ValueError(f"class {k} has no context examples")
        protos.append(zk.astype(np.float64).mean(axis=0))
    return ProtoHead(np.array(protos))


def predict(head, embeddings) -> np.ndarray:
    """Logits (m x way) for any head type."""
    z = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    if isinstance(head, LinearHead):
        dim = head.weight.shape[1]
    elif isinstance(head, ProtoHead):
        dim = head.prototypes.shape[1]
    elif isinstance(head, MahalanobisHead):
        dim = head.means.shape[1]
    else:
        raise TypeError(f"unknown head type {type(head).__name__}")
    if z.ndim != 2 or z.shape[1] != dim:
        raise T.ShapeError(f"embeddings have shape {z.shape}, head expects dimension {dim}")
    if isinstance(head, LinearHead):
        with T.no_grad():
            return head.logits(Tensor(z, dtype=head.weight.dtype)).data
    if isinstance(head, ProtoHead):
        z64 = z.astype(np.float64)
        return -((z64[:, None, :] - head.prototypes[None]) ** 2).sum(-1)
    return -head.squared_distances(z)
