"""Small convolutional body with frozen weights and adapter insertion points.

Stage layout: conv -> batchnorm -> activation -> adapter. FiLM modulation, when
used, sits between batchnorm and the activation instead.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .adapters import CaseBlock, CaseConfig, FilmLiteGenerator, SeBlock
from .optim import Adam
from .rng import stream
from .tensor import Tensor

log = logging.getLogger(__name__)

ADAPTER_KINDS = ("none", "case", "se", "film")


@dataclass
class StageSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 2
    insert_adapter: bool = True

    @property
    def padding(self) -> int:
        return self.kernel // 2


def _default_stages() -> list[StageSpec]:
    return [StageSpec(32), StageSpec(64), StageSpec(128), StageSpec(256)]


@dataclass
class BackboneSpec:
    stages: list[StageSpec] = field(default_factory=_default_stages)
    input_channels: int = 3
    input_resolution: int = 32
    activation: str = "silu"
    bn_eps: float = 1e-5

    @property
    def embedding_dim(self) -> int:
        return self.stages[-1].out_channels

    def spatial_sizes(self) -> list[int]:
        """Output side length of every stage."""
        sizes, s = [], self.input_resolution
        for st in self.stages:
            s = T.conv_output_size(s, st.kernel, st.stride, st.padding)
            if s < 1:
                raise ValueError(f"stage with kernel {st.kernel} stride {st.stride} shrinks input below 1 pixel")
            sizes.append(s)
        return sizes

    def adapter_stages(self) -> list[int]:
        return [i for i, st in enumerate(self.stages) if st.insert_adapter]


class AdapterStateError(RuntimeError):
    pass


class Backbone:
    def __init__(self, spec: BackboneSpec, seed: int = 0):
        if spec.activation not in ("silu", "relu"):
            raise ValueError(f"unsupported activation {spec.activation!r}")
        spec.spatial_sizes()
        self.spec = spec
        rng = stream(seed, "backbone.init")
        self.stages: list[dict[str, Tensor]] = []
        cin = spec.input_channels
        for i, st in enumerate(spec.stages):
            fan_in = cin * st.kernel * st.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(st.out_channels, cin, st.kernel, st.kernel))
            c = st.out_channels
            self.stages.append({
                "conv_weight": Tensor(w, name=f"backbone/{i}/conv_weight"),
                "conv_bias": Tensor(np.zeros(c), name=f"backbone/{i}/conv_bias"),
                "bn_gamma": Tensor(np.ones(c), name=f"backbone/{i}/bn_gamma"),
                "bn_beta": Tensor(np.zeros(c), name=f"backbone/{i}/bn_beta"),
                "bn_mean": Tensor(np.zeros(c), name=f"backbone/{i}/bn_mean"),
                "bn_var": Tensor(np.ones(c), name=f"backbone/{i}/bn_var"),
            })
            cin = c
        self.adapters: list = [None] * len(spec.stages)
        self.film: Optional[FilmLiteGenerator] = None
        self.adapter_kind = "none"
        self.adapters_enabled = True
        self.forward_count = 0
        self.base_accuracy: Optional[float] = None

    # -- parameters -------------------------------------------------------------
    def theta(self) -> list[Tensor]:
        return [t for st in self.stages for t in st.values()]

    def trainable_theta(self) -> list[Tensor]:
        return [st[k] for st in self.stages for k in ("conv_weight", "conv_bias", "bn_gamma", "bn_beta")]

    def freeze(self):
        for t in self.theta():
            t.requires_grad = False
            t.grad = None

    def unfreeze(self):
        for t in self.trainable_theta():
            t.requires_grad = True

    def adapter_blocks(self) -> list:
        if self.film is not None:
            return [self.film]
        return [a for a in self.adapters if a is not None]

    def adapter_parameters(self) -> list[Tensor]:
        return [p for b in self.adapter_blocks() for p in b.parameters()]

    def named_tensors(self) -> dict[str, Tensor]:
        out = {t.name: t for t in self.theta()}
        for i, a in enumerate(self.adapters):
            if a is not None:
                for pname, p in a.mlp.named_parameters():
                    out[f"adapter/{i}/{pname}"] = p
        if self.film is not None:
            for j, (w, b) in enumerate(self.film.encoder):
                out[f"adapter/encoder/conv{j}_weight"] = w
                out[f"adapter/encoder/conv{j}_bias"] = b
            for i, mlp in zip(self.spec.adapter_stages(), self.film.mlps):
                for pname, p in mlp.named_parameters():
                    out[f"adapter/{i}/{pname}"] = p
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray], strict: bool = True):
        mine = self.named_tensors()
        missing = [n for n in mine if n not in tensors]
        if strict and missing:
            raise KeyError(f"checkpoint lacks tensors: {missing[:5]}")
        for name, t in mine.items():
            if name in tensors:
                arr = np.asarray(tensors[name])
                if arr.shape != t.shape:
                    raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {t.shape}")
                t.data = arr.astype(t.data.dtype)

    def clone(self) -> "Backbone":
        return copy.deepcopy(self)

    # -- adapters ----------------------------------------------------------------
    def attach_adapters(self, kind: str, config: Optional[CaseConfig] = None, seed: int = 0,
                        film_encoder_channels: Sequence[int] = (32, 64)):
        if kind not in ADAPTER_KINDS:
            raise ValueError(f"unknown adapter kind {kind!r}")
        config = config or CaseConfig()
        rng = stream(seed, f"adapters.{kind}.init")
        self.adapters = [None] * len(self.spec.stages)
        self.film = None
        self.adapter_kind = kind
        if kind == "film":
            chans = [self.spec.stages[i].out_channels for i in self.spec.adapter_stages()]
            self.film = FilmLiteGenerator(self.spec.input_channels, chans, config, rng, film_encoder_channels)
        elif kind in ("case", "se"):
            cls = CaseBlock if kind == "case" else SeBlock
            for i in self.spec.adapter_stages():
                self.adapters[i] = cls(self.spec.stages[i].out_channels, config, rng, name=f"adapter.{i}")
        return self

    def set_mode(self, mode: str):
        for b in self.adapter_blocks():
            b.mode = mode

    def case_mlp_evals(self) -> int:
        return sum(b.mlp_evals for b in self.adapter_blocks())

    # -- forward -------------------------------------------------------------------
    def _check_input(self, images: Tensor):
        s = self.spec
        if images.ndim != 4 or images.shape[1] != s.input_channels or images.shape[2:] != (s.input_resolution,) * 2:
            raise T.ShapeError(
                f"expected n x {s.input_channels} x {s.input_resolution} x {s.input_resolution}, got {images.shape}")

    def features(self, images, adapter_mode: Optional[str] = "adaptive", bn_train: bool = False,
                 bn_momentum: float = 0.1) -> Tensor:
        """Run the body. ``adapter_mode=None`` bypasses adapters entirely."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        self._check_input(x)
        self.forward_count += 1
        use_adapters = self.adapters_enabled and adapter_mode is not None and self.adapter_kind != "none"
        if use_adapters:
            self.set_mode(adapter_mode)
        film_slot = 0
        if use_adapters and self.film is not None and adapter_mode == "adaptive":
            self.film.adapt(x)
        act = T.ACTIVATIONS[self.spec.activation]
        h = x
        for i, (st, p) in enumerate(zip(self.spec.stages, self.stages)):
            h = T.conv2d(h, p["conv_weight"], p["conv_bias"], stride=st.stride, padding=st.padding)
            if bn_train:
                h = self._bn_train(h, p, bn_momentum)
            else:
                h = T.batchnorm(h, p["bn_mean"], p["bn_var"], p["bn_gamma"], p["bn_beta"], self.spec.bn_eps)
            if use_adapters and self.film is not None and st.insert_adapter:
                scale, shift = self.film.modulation(film_slot)
                film_slot += 1
                C = st.out_channels
                h = h * scale.reshape(1, C, 1, 1) + shift.reshape(1, C, 1, 1)
            h = act(h)
            if use_adapters and self.adapters[i] is not None:
                h = self.adapters[i](h)
        return T.global_avg_pool(h)

    def embed(self, images, adapter_mode: str = "adaptive") -> Tensor:
        if adapter_mode not in ("adaptive", "inference"):
            raise ValueError(f"unknown adapter mode {adapter_mode!r}")
        return self.features(images, adapter_mode)

    def _bn_train(self, h: Tensor, p: dict, momentum: float) -> Tensor:
        mean = h.mean(axis=(0, 2, 3), keepdims=True)
        xc = h - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        out = xc / (var + self.spec.bn_eps) ** 0.5
        C = h.shape[1]
        n = h.size // C
        unbiased = var.data.reshape(C) * n / max(n - 1, 1)
        p["bn_mean"].data = ((1 - momentum) * p["bn_mean"].data + momentum * mean.data.reshape(C)).astype(h.data.dtype)
        p["bn_var"].data = ((1 - momentum) * p["bn_var"].data + momentum * unbiased).astype(h.data.dtype)
        return out * p["bn_gamma"].reshape(1, C, 1, 1) + p["bn_beta"].reshape(1, C, 1, 1)


@dataclass
class ArrayDataset:
    images: np.ndarray
    labels: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def __len__(self):
        return len(self.labels)


class DivergenceError(RuntimeError):
    pass


def pretrain(spec: BackboneSpec, base: ArrayDataset, epochs: int, seed: int = 0, lr: float = 1e-3,
             batch_size: int = 64) -> Backbone:
    """Supervised pretraining of the body on a labelled base set, then freeze.

    Batchnorm uses batch statistics while training and is frozen to the running
    estimates afterwards. The final accuracy on ``base`` is stored on the result.
    """
    if base.num_classes < 2:
        raise ValueError("base dataset needs at least 2 classes")
    bb = Backbone(spec, seed)
    rng = stream(seed, "pretrain.batches")
    head_rng = stream(seed, "pretrain.head")
    k = base.num_classes
    d = spec.embedding_dim
    w = Tensor(head_rng.normal(0, np.sqrt(1.0 / d), size=(k, d)), requires_grad=True, name="pretrain.head.weight")
    b = Tensor(np.zeros(k), requires_grad=True, name="pretrain.head.bias")
    if epochs > 0:
        bb.unfreeze()
        opt = Adam(bb.trainable_theta() + [w, b])
        n = len(base)
        for epoch in range(epochs):
            order = rng.permutation(n)
            losses = []
            for s in range(0, n, batch_size):
                idx = order[s:s + batch_size]
                if len(idx) < 2:
                    continue
                try:
                    z = bb.features(base.images[idx], adapter_mode=None, bn_train=True)
                    loss = T.cross_entropy(T.linear(z, w, b), base.labels[idx])
                except T.NonFiniteError as e:
                    raise DivergenceError(f"pretraining diverged in epoch {epoch}: {e}") from e
                loss.backward()
                opt.step(lr)
                losses.append(loss.item())
            log.info("pretrain epoch %d loss %.4f", epoch, float(np.mean(losses)) if losses else float("nan"))
    bb.freeze()
    with T.no_grad():
        correct = 0
        for s in range(0, len(base), 256):
            z = bb.features(base.images[s:s + 256], adapter_mode=None)
            logits = T.linear(z, w, b).data
            correct += int((logits.argmax(1) == base.labels[s:s + 256]).sum())
    bb.base_accuracy = correct / max(len(base), 1)
    bb.forward_count = 0
    return bb


@dataclass
class GammaStats:
    """Box-plot summary of pooled scale-vector entries for one adapter block."""

    block: int
    count: int
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: int

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def summarize_gammas(block: int, values: np.ndarray) -> GammaStats:
    """Quartiles by linear interpolation; whiskers reach the furthest points within 1.5 IQR."""
    v = np.asarray(values, dtype=np.float64).ravel()
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    lo, hi = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
    inside = v[(v >= lo) & (v <= hi)]
    return GammaStats(block, int(v.size), float(med), float(q1), float(q3),
                      float(inside.min()), float(inside.max()), int(v.size - inside.size))


def dump_gamma_stats(backbone: Backbone, tasks) -> list[GammaStats]:
    """Per CaSE block, statistics of the scale entries produced over ``tasks``."""
    blocks = [(i, a) for i, a in enumerate(backbone.adapters) if isinstance(a, CaseBlock)]
    if not blocks:
        raise ValueError("backbone has no CaSE adapters")
    pooled = {i: [] for i, _ in blocks}
    for task in tasks:
        with T.no_grad():
            backbone.embed(task.context_images, "adaptive")
        for i, a in blocks:
            pooled[i].append(a.cached_gamma.data.copy())
    backbone.set_mode("adaptive")
    return [summarize_gammas(i, np.concatenate(pooled[i])) for i, _ in blocks]


def gamma_stats_csv(stats: Sequence[GammaStats]) -> str:
    lines = ["block,count,median,q1,q3,whisker_low,whisker_high,outliers"]
    for s in stats:
        lines.append(f"{s.block},{s.count},{s.median:.6f},{s.q1:.6f},{s.q3:.6f},"
                     f"{s.whisker_low:.6f},{s.whisker_high:.6f},{s.outliers}")
    return "\n".join(lines) + "\n"
