"""Analytic multiply-accumulate and parameter accounting for adaptation strategies.

Conventions:
  * conv: Cin * Cout * K * K * H' * W' MACs per instance; linear: in * out per row.
  * batchnorm, activations, pooling and elementwise modulation: 0 MACs. The
    modulation multiplies are reported separately as ``flops_modulation``.
  * CaSE and FiLM generator MLPs run once per adaptation; SE MLPs once per instance.
  * A backward pass costs 2x its forward pass.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .adapters import CaseConfig
from .backbone import BackboneSpec
from .tensor import conv_output_size

STRATEGIES = ("uppercase", "head_only", "full_finetune", "film_lite", "se")
BACKWARD_FACTOR = 2

CAVEAT = ("# MACs are desk-scale analytic counts for one backbone and image size; "
          "they compare strategies on equal footing but are not comparable to published figures.")


class UnknownLayerError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    mlp_macs: int = 0

    def output_shape(self, shape: tuple) -> tuple:
        if self.kind == "conv":
            _, _, h, w = shape
            return (shape[0], self.out_channels,
                    conv_output_size(h, self.kernel, self.stride, self.padding),
                    conv_output_size(w, self.kernel, self.stride, self.padding))
        if self.kind == "linear":
            return (shape[0], self.out_channels)
        if self.kind == "pool":
            return shape[:2]
        return shape


def macs_of_layer(layer: Layer, input_shape: Sequence[int]) -> int:
    """MACs of one layer on a batch; ``input_shape`` includes the batch dimension."""
    shape = tuple(int(s) for s in input_shape)
    if layer.kind == "conv":
        if len(shape) != 4 or shape[1] != layer.in_channels:
            raise ValueError(f"{layer.name}: conv input shape {shape} inconsistent with Cin={layer.in_channels}")
        b, _, ho, wo = layer.output_shape(shape)
        return b * layer.in_channels * layer.out_channels * layer.kernel * layer.kernel * ho * wo
    if layer.kind == "linear":
        if len(shape) != 2 or shape[1] != layer.in_channels:
            raise ValueError(f"{layer.name}: linear input shape {shape} inconsistent with in={layer.in_channels}")
        return shape[0] * layer.in_channels * layer.out_channels
    if layer.kind == "adapter_mlp":
        return layer.mlp_macs
    if layer.kind == "se_mlp":
        return shape[0] * layer.mlp_macs
    if layer.kind in ("bn", "act", "pool", "modulate"):
        return 0
    raise UnknownLayerError(f"unknown layer kind {layer.kind!r}")


def mlp_macs(in_dim: int, out_dim: int, cfg: CaseConfig, heads: int = 1) -> int:
    h = cfg.hidden_width(out_dim)
    dims = [in_dim] + [h] * cfg.hidden_layers
    return sum(a * b for a, b in zip(dims[:-1], dims[1:])) + heads * h * out_dim


def mlp_params(in_dim: int, out_dim: int, cfg: CaseConfig, heads: int = 1) -> int:
    h = cfg.hidden_width(out_dim)
    dims = [in_dim] + [h] * cfg.hidden_layers
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:])) + heads * (h * out_dim + out_dim)


def body_layers(spec: BackboneSpec, adapter: str = "none", cfg: Optional[CaseConfig] = None) -> list[Layer]:
    """Layer descriptors of one body forward, in execution order."""
    cfg = cfg or CaseConfig()
    layers, cin = [], spec.input_channels
    for i, st in enumerate(spec.stages):
        c = st.out_channels
        layers.append(Layer("conv", f"stage{i}.conv", cin, c, st.kernel, st.stride, st.padding))
        layers.append(Layer("bn", f"stage{i}.bn"))
        if adapter == "film" and st.insert_adapter:
            layers.append(Layer("modulate", f"stage{i}.film"))
        layers.append(Layer("act", f"stage{i}.act"))
        if st.insert_adapter and adapter == "case":
            layers.append(Layer("adapter_mlp", f"stage{i}.case_mlp", c, c, mlp_macs=mlp_macs(c, c, cfg)))
            layers.append(Layer("modulate", f"stage{i}.case"))
        elif st.insert_adapter and adapter == "case_inference":
            layers.append(Layer("modulate", f"stage{i}.case"))
        elif st.insert_adapter and adapter == "se":
            layers.append(Layer("se_mlp", f"stage{i}.se_mlp", c, c, mlp_macs=mlp_macs(c, c, cfg)))
            layers.append(Layer("modulate", f"stage{i}.se"))
        cin = c
    layers.append(Layer("pool", "pool"))
    return layers


def film_layers(spec: BackboneSpec, cfg: Optional[CaseConfig] = None,
                encoder_channels: Sequence[int] = (32, 64)) -> list[Layer]:
    cfg = cfg or CaseConfig()
    layers, cin = [], spec.input_channels
    for j, c in enumerate(encoder_channels):
        layers.append(Layer("conv", f"film.encoder{j}", cin, c, 3, 2, 1))
        layers.append(Layer("act", f"film.encoder{j}.act"))
        cin = c
    layers.append(Layer("pool", "film.encoder.pool"))
    for i in spec.adapter_stages():
        c = spec.stages[i].out_channels
        layers.append(Layer("adapter_mlp", f"film.mlp{i}", cin, c, mlp_macs=mlp_macs(cin, c, cfg, heads=2)))
    return layers


def run_layers(layers: Sequence[Layer], spec: BackboneSpec, n: int) -> list[tuple[str, int]]:
    """Per-layer MACs for ``n`` instances pushed through ``layers``."""
    shape = (n, spec.input_channels, spec.input_resolution, spec.input_resolution)
    out = []
    for layer in layers:
        if layer.kind == "adapter_mlp":
            out.append((layer.name, macs_of_layer(layer, shape)))
            continue
        out.append((layer.name, macs_of_layer(layer, shape)))
        shape = layer.output_shape(shape)
    return out


def forward_macs(spec: BackboneSpec, n: int, adapter: str = "none", cfg: Optional[CaseConfig] = None,
                 mode: str = "adaptive", encoder_channels: Sequence[int] = (32, 64)) -> int:
    """Total MACs of one body forward over ``n`` instances."""
    kind = adapter
    if adapter == "case" and mode == "inference":
        kind = "case_inference"
    total = sum(m for _, m in run_layers(body_layers(spec, "film" if adapter == "film" else kind, cfg), spec, n))
    if adapter == "film" and mode == "adaptive":
        total += sum(m for _, m in run_layers(film_layers(spec, cfg, encoder_channels), spec, n))
    return total


def modulation_flops(spec: BackboneSpec, n: int, adapter: str) -> int:
    """Elementwise multiplies (and adds for FiLM shifts) applied by adapters."""
    if adapter in ("none", None):
        return 0
    sizes = spec.spatial_sizes()
    per = sum(spec.stages[i].out_channels * sizes[i] ** 2 for i in spec.adapter_stages())
    return n * per * (2 if adapter == "film" else 1)


def body_params(spec: BackboneSpec) -> int:
    total, cin = 0, spec.input_channels
    for st in spec.stages:
        total += st.out_channels * cin * st.kernel ** 2 + st.out_channels + 2 * st.out_channels
        cin = st.out_channels
    return total


def adapter_params(spec: BackboneSpec, adapter: str, cfg: Optional[CaseConfig] = None,
                   encoder_channels: Sequence[int] = (32, 64)) -> int:
    cfg = cfg or CaseConfig()
    if adapter in ("none", None):
        return 0
    if adapter in ("case", "se"):
        return sum(mlp_params(spec.stages[i].out_channels, spec.stages[i].out_channels, cfg)
                   for i in spec.adapter_stages())
    if adapter == "film":
        total, cin = 0, spec.input_channels
        for c in encoder_channels:
            total += c * cin * 9 + c
            cin = c
        return total + sum(mlp_params(cin, spec.stages[i].out_channels, cfg, heads=2)
                           for i in spec.adapter_stages())
    raise ValueError(f"unknown adapter {adapter!r}")


@dataclass(frozen=True)
class SyntheticCostTask:
    way: int = 100
    shot: int = 10
    resolution: Optional[int] = None  # None: the backbone's input resolution
    head_steps: int = 500
    head_batch: int = 128
    targets: int = 1


@dataclass
class CostReport:
    strategy: str
    breakdown: list[tuple[str, str, int]] = field(default_factory=list)  # (phase, layer, macs)
    params_total: int = 0
    params_adaptive: int = 0
    params_head: int = 0
    flops_modulation: int = 0

    def _phase(self, phase: str) -> int:
        return sum(m for p, _, m in self.breakdown if p == phase)

    @property
    def macs_context_forward(self) -> int:
        return self._phase("context_forward")

    @property
    def macs_head_fit(self) -> int:
        return self._phase("head_fit")

    @property
    def macs_body_finetune(self) -> int:
        return self._phase("body_finetune")

    @property
    def macs_target_inference(self) -> int:
        return self._phase("target_inference")

    @property
    def macs_adaptation(self) -> int:
        return self.macs_context_forward + self.macs_head_fit + self.macs_body_finetune

    @property
    def tera_macs(self) -> str:
        return f"{self.macs_adaptation / 1e12:.1f}"

    def add(self, phase: str, entries: Sequence[tuple[str, int]], factor: int = 1):
        for name, m in entries:
            self.breakdown.append((phase, name, int(m) * factor))


def adaptation_cost(strategy: str, spec: BackboneSpec, task: SyntheticCostTask = SyntheticCostTask(),
                    cfg: Optional[CaseConfig] = None, encoder_channels: Sequence[int] = (32, 64)) -> CostReport:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    cfg = cfg or CaseConfig()
    if task.resolution is not None and task.resolution != spec.input_resolution:
        spec = BackboneSpec(spec.stages, spec.input_channels, task.resolution, spec.activation, spec.bn_eps)
    n = task.way * task.shot
    d = spec.embedding_dim
    head = Layer("linear", "head", d, task.way)
    head_fwd = macs_of_layer(head, (task.head_batch, d))
    adapter = {"uppercase": "case", "film_lite": "film", "se": "se"}.get(strategy, "none")
    rep = CostReport(strategy)
    rep.params_head = d * task.way + task.way
    rep.params_total = body_params(spec) + adapter_params(spec, adapter, cfg, encoder_channels) + rep.params_head
    rep.params_adaptive = body_params(spec) if strategy == "full_finetune" else \
        adapter_params(spec, adapter, cfg, encoder_channels)

    infer_kind = {"case": "case_inference", "film": "film"}.get(adapter, adapter)
    if strategy == "full_finetune":
        per_step = run_layers(body_layers(spec, "none", cfg), spec, task.head_batch)
        rep.add("body_finetune", [(f"{name}.fwd+bwd", m * task.head_steps) for name, m in per_step],
                factor=1 + BACKWARD_FACTOR)
    else:
        rep.add("context_forward", run_layers(body_layers(spec, adapter, cfg), spec, n))
        if adapter == "film":
            rep.add("context_forward", run_layers(film_layers(spec, cfg, encoder_channels), spec, n))
    rep.add("head_fit", [("head.fwd+bwd", head_fwd * task.head_steps)], factor=1 + BACKWARD_FACTOR)
    rep.add("target_inference", run_layers(body_layers(spec, "none" if strategy == "full_finetune" else infer_kind,
                                                       cfg), spec, task.targets))
    rep.add("target_inference", [("head", macs_of_layer(head, (task.targets, d)))])
    rep.flops_modulation = modulation_flops(spec, n + task.targets, adapter) if strategy != "full_finetune" else 0
    return rep


def pareto_csv(rows: Sequence[tuple[str, float, int, int]]) -> str:
    """``strategy,accuracy,macs,params_adaptive`` rows for accuracy-vs-cost plots."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "accuracy", "macs", "params_adaptive"])
    for strategy, acc, macs, params in rows:
        w.writerow([strategy, f"{acc:.6f}", macs, params])
    return buf.getvalue()


def cost_csv(reports: Sequence[CostReport]) -> str:
    buf = io.StringIO()
    buf.write(CAVEAT + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "macs_context_forward", "macs_head_fit", "macs_body_finetune",
                "macs_target_inference", "macs_adaptation", "tera_macs", "flops_modulation",
                "params_total", "params_adaptive", "params_head"])
    for r in reports:
        w.writerow([r.strategy, r.macs_context_forward, r.macs_head_fit, r.macs_body_finetune,
                    r.macs_target_inference, r.macs_adaptation, r.tera_macs, r.flops_modulation,
                    r.params_total, r.params_adaptive, r.params_head])
    return buf.getvalue()
