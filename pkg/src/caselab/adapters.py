"""Channel-modulation adapters: SE, CaSE and a FiLM-style generator baseline.

All three wrap a small MLP whose last layer is zero-initialized so that, with
``sigmoid2`` (c * sigmoid) or ``linear`` (bias one) output activations, the
adapter starts as the identity map.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

HIDDEN_ACTIVATIONS = ("silu", "relu", "tanh")
OUTPUT_ACTIVATIONS = ("sigmoid2", "sigmoid", "linear")


class AdapterError(RuntimeError):
    pass


@dataclass
class CaseConfig:
    reduction: int = 64
    min_units: int = 16
    hidden_layers: int = 2
    hidden_activation: str = "silu"
    output_activation: str = "sigmoid2"
    standardize: bool = True
    sigmoid_scale: float = 2.0
    std_eps: float = 1e-5

    def __post_init__(self):
        if self.reduction < 1 or self.min_units < 1:
            raise ValueError("reduction and min_units must be positive")
        if self.hidden_layers < 1:
            raise ValueError("hidden_layers must be >= 1")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    def hidden_width(self, channels: int) -> int:
        return max(channels // self.reduction, self.min_units)


class AdapterMLP:
    """``in_dim -> hidden x hidden_layers -> out`` with one or more output heads.

    Each head is a separate final linear layer; a head tagged ``"shift"`` is a
    zero-initialized linear output, any other head uses ``config.output_activation``.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int, config: CaseConfig,
                 rng: np.random.Generator, heads: Sequence[str] = ("scale",), name: str = "mlp"):
        self.config = config
        self.in_dim, self.out_dim, self.hidden = in_dim, out_dim, hidden
        self.head_kinds = tuple(heads)
        self.layers: list[tuple[Tensor, Tensor]] = []
        fan_in = in_dim
        for i in range(config.hidden_layers):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(hidden, fan_in))
            self.layers.append((Tensor(w, requires_grad=True, name=f"{name}.{i}.weight"),
                                Tensor(np.zeros(hidden), requires_grad=True, name=f"{name}.{i}.bias")))
            fan_in = hidden
        self.heads: list[tuple[Tensor, Tensor]] = []
        for kind in self.head_kinds:
            bias = np.ones(out_dim) if (kind != "shift" and config.output_activation == "linear") else np.zeros(out_dim)
            self.heads.append((Tensor(np.zeros((out_dim, hidden)), requires_grad=True, name=f"{name}.{kind}.weight"),
                               Tensor(bias, requires_grad=True, name=f"{name}.{kind}.bias")))

    def parameters(self) -> list[Tensor]:
        return [t for pair in self.layers + self.heads for t in pair]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.layers):
            out += [(f"hidden{i}_weight", w), (f"hidden{i}_bias", b)]
        for kind, (w, b) in zip(self.head_kinds, self.heads):
            out += [(f"{kind}_weight", w), (f"{kind}_bias", b)]
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def macs(self) -> int:
        dims = [self.in_dim] + [self.hidden] * self.config.hidden_layers
        trunk = sum(a * b for a, b in zip(dims[:-1], dims[1:]))
        return trunk + len(self.heads) * self.hidden * self.out_dim

    def _output(self, z: Tensor, kind: str) -> Tensor:
        if kind == "shift" or self.config.output_activation == "linear":
            return z
        s = T.sigmoid(z)
        if self.config.output_activation == "sigmoid2":
            return s * self.config.sigmoid_scale
        return s

    def __call__(self, x: Tensor) -> list[Tensor]:
        act = T.ACTIVATIONS[self.config.hidden_activation]
        h = x
        for w, b in self.layers:
            h = act(T.linear(h, w, b))
        return [self._output(T.linear(h, w, b), kind) for kind, (w, b) in zip(self.head_kinds, self.heads)]

    def identity_init(self):
        for kind, (w, b) in zip(self.head_kinds, self.heads):
            w.data = np.zeros_like(w.data)
            one = kind != "shift" and self.config.output_activation == "linear"
            b.data = np.ones_like(b.data) if one else np.zeros_like(b.data)


def _check_channels(H: Tensor, channels: int, who: str):
    if H.ndim != 4:
        raise T.ShapeError(f"{who} expects N x C x H x W, got {H.shape}")
    if H.shape[1] != channels:
        raise T.ShapeError(f"{who}: channel mismatch, block has {channels}, input has {H.shape[1]}")


class SeBlock:
    """Per-instance squeeze-and-excitation: one scale vector per input."""

    kind = "se"

    def __init__(self, channels: int, config: CaseConfig, rng: np.random.Generator, name: str = "se"):
        cfg = CaseConfig(**{**config.__dict__, "standardize": False})
        self.config = cfg
        self.channels = channels
        self.mlp = AdapterMLP(channels, channels, cfg.hidden_width(channels), cfg, rng, name=name)
        self.mlp_evals = 0
        self.last_gamma: Optional[Tensor] = None
        self.mode = "adaptive"  # SE makes no mode distinction; kept for a uniform interface

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    def __call__(self, H: Tensor) -> Tensor:
        _check_channels(H, self.channels, "SeBlock")
        B, C = H.shape[:2]
        (gamma,) = self.mlp(T.global_avg_pool(H))
        self.mlp_evals += 1
        self.last_gamma = gamma
        return H * gamma.reshape(B, C, 1, 1)


class CaseBlock:
    """Contextual squeeze-and-excitation.

    In adaptive mode the block pools its input over space and then over the
    whole batch (the context set), runs the MLP once and caches the resulting
    scale vector. In inference mode it only multiplies by the cached vector.
    """

    kind = "case"

    def __init__(self, channels: int, config: CaseConfig, rng: np.random.Generator, name: str = "case"):
        self.config = config
        self.channels = channels
        self.mlp = AdapterMLP(channels, channels, config.hidden_width(channels), config, rng, name=name)
        self.mlp_evals = 0
        self.cached_gamma: Optional[Tensor] = None
        self._mode = "adaptive"

    @property
    def mode(self) -> str:
        return self._mode

    @mode.setter
    def mode(self, value: str):
        if value not in ("adaptive", "inference"):
            raise ValueError(f"unknown mode {value!r}")
        if value == "adaptive":
            self.cached_gamma = None
        self._mode = value

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    def pooled_context(self, H: Tensor) -> Tensor:
        pooled = T.global_avg_pool(H).mean(axis=0, keepdims=True)
        if self.config.standardize:
            pooled = T.standardize(pooled, self.config.std_eps)
        return pooled

    def adapt(self, H: Tensor) -> Tensor:
        if self._mode != "adaptive":
            raise AdapterError("adapt called on a block in inference mode")
        _check_channels(H, self.channels, "CaseBlock")
        if H.shape[0] == 0:
            raise AdapterError("context pooling needs at least one instance")
        (gamma,) = self.mlp(self.pooled_context(H))
        self.mlp_evals += 1
        self.cached_gamma = gamma.reshape(self.channels)
        return H * self.cached_gamma.reshape(1, self.channels, 1, 1)

    def infer(self, H: Tensor) -> Tensor:
        if self._mode != "inference":
            raise AdapterError("infer called on a block in adaptive mode")
        if self.cached_gamma is None:
            raise AdapterError("no cached scale vector: adapt before infer")
        _check_channels(H, self.channels, "CaseBlock")
        return H * self.cached_gamma.reshape(1, self.channels, 1, 1)

    def __call__(self, H: Tensor) -> Tensor:
        return self.adapt(H) if self._mode == "adaptive" else self.infer(H)


class FilmLiteGenerator:
    """Global-pooling FiLM generator.

    A two-layer convolutional set encoder embeds every context image; the mean
    embedding feeds one MLP per modulated layer, each emitting a scale and a shift.
    """

    kind = "film"

    def __init__(self, in_channels: int, layer_channels: Sequence[int], config: CaseConfig,
                 rng: np.random.Generator, encoder_channels: Sequence[int] = (32, 64)):
        self.config = config
        self.layer_channels = list(layer_channels)
        self.encoder: list[tuple[Tensor, Tensor]] = []
        cin = in_channels
        for i, cout in enumerate(encoder_channels):
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3))
            self.encoder.append((Tensor(w, requires_grad=True, name=f"film.encoder.{i}.weight"),
                                 Tensor(np.zeros(cout), requires_grad=True, name=f"film.encoder.{i}.bias")))
            cin = cout
        self.embedding_dim = cin
        self.mlps = [AdapterMLP(cin, c, config.hidden_width(c), config, rng, heads=("scale", "shift"),
                                name=f"film.{i}") for i, c in enumerate(self.layer_channels)]
        self.cached: Optional[list[tuple[Tensor, Tensor]]] = None
        self.mlp_evals = 0
        self._mode = "adaptive"

    @property
    def mode(self) -> str:
        return self._mode

    @mode.setter
    def mode(self, value: str):
        if value not in ("adaptive", "inference"):
            raise ValueError(f"unknown mode {value!r}")
        if value == "adaptive":
            self.cached = None
        self._mode = value

    def parameters(self) -> list[Tensor]:
        enc = [t for pair in self.encoder for t in pair]
        return enc + [p for m in self.mlps for p in m.parameters()]

    def encoder_parameters(self) -> list[Tensor]:
        return [t for pair in self.encoder for t in pair]

    def encode(self, images: Tensor) -> Tensor:
        h = images
        for w, b in self.encoder:
            h = T.relu(T.conv2d(h, w, b, stride=2, padding=1))
        return T.global_avg_pool(h)

    def adapt(self, context_images: Tensor) -> list[tuple[Tensor, Tensor]]:
        if context_images.shape[0] == 0:
            raise AdapterError("set encoder needs at least one context image")
        e = self.encode(context_images).mean(axis=0, keepdims=True)
        out = []
        for c, mlp in zip(self.layer_channels, self.mlps):
            scale, shift = mlp(e)
            self.mlp_evals += 1
            out.append((scale.reshape(c), shift.reshape(c)))
        self.cached = out
        return out

    def modulation(self, index: int) -> tuple[Tensor, Tensor]:
        if self.cached is None:
            raise AdapterError("no cached FiLM parameters: adapt before infer")
        return self.cached[index]


def count_adapter_params(blocks: Iterable) -> int:
    """Learnable scalars across adapter MLPs (and the set encoder for FiLM)."""
    total = 0
    for b in blocks:
        if b is None:
            continue
        total += sum(p.size for p in b.parameters())
    return total
