"""Coordinate-descent meta-training of adapter parameters and episodic evaluation.

Per task: embed the context with adapters in adaptive mode (no graph), fit a
zero-initialized linear head on the cached embeddings, then, holding the head
fixed, backpropagate the classification loss on context and target points
through the body into the adapter parameters.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .backbone import Backbone
from .episodes import Task, TaskSampler
from .heads import EmbeddingBuffer, LinearHead, fit_head, predict
from .optim import Adam, LinearSchedule
from .rng import stream
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    total_tasks: int = 2000
    tasks_per_outer_update: int = 8
    inner_steps: int = 500
    inner_batch: int = 128
    body_lr_start: float = 3e-3
    body_lr_end: float = 1e-5
    head_lr_start: float = 1e-3
    head_lr_end: float = 1e-5
    seed: int = 0
    max_skip_fraction: float = 0.01

    def __post_init__(self):
        if self.total_tasks < 0 or self.tasks_per_outer_update < 1 or self.inner_steps < 0 or self.inner_batch < 1:
            raise ValueError("trainer counts must be positive")
        if self.body_lr_end > self.body_lr_start or self.head_lr_end > self.head_lr_start:
            raise ValueError("learning-rate schedules must be non-increasing")

    def head_schedule(self) -> LinearSchedule:
        return LinearSchedule(self.head_lr_start, self.head_lr_end, self.inner_steps)

    def body_schedule(self) -> LinearSchedule:
        updates = max(1, math.ceil(self.total_tasks / self.tasks_per_outer_update))
        return LinearSchedule(self.body_lr_start, self.body_lr_end, updates)


@dataclass
class BaselineConfig:
    mode: str = "head_only"
    finetune_lr: float = 1e-3
    finetune_steps: int = 50

    def __post_init__(self):
        if self.mode not in ("head_only", "full_finetune"):
            raise ValueError(f"unknown baseline mode {self.mode!r}")


@dataclass
class EvalReport:
    accuracies: list[float]
    ways: list[int] = field(default_factory=list)
    shots: list[int] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else 0.0

    @property
    def ci95(self) -> float:
        if self.count < 2:
            return 0.0
        return float(1.96 * np.std(self.accuracies, ddof=1) / math.sqrt(self.count))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task_id", "way", "shots", "accuracy"])
        for i, acc in enumerate(self.accuracies):
            w.writerow([i, self.ways[i] if self.ways else "", self.shots[i] if self.shots else "", f"{acc:.6f}"])
        return buf.getvalue()


@dataclass
class TrainLog:
    rows: list[tuple[int, float, int]] = field(default_factory=list)
    skipped: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "task_loss", "skip_count"])
        for step, loss, skips in self.rows:
            w.writerow([step, f"{loss:.6f}", skips])
        return buf.getvalue()


def context_buffer(backbone: Backbone, task: Task) -> EmbeddingBuffer:
    """Adaptive-mode context forward without a graph; refreshes adapter caches."""
    with T.no_grad():
        z = backbone.embed(task.context_images, "adaptive")
    return EmbeddingBuffer(z.data, task.context_labels)


def outer_loss(backbone: Backbone, head: LinearHead, task: Task) -> Tensor:
    """Loss on context and target points with the head held constant.

    The context pass runs in adaptive mode with the graph recorded, so the
    cached scale vectors stay connected to the adapter parameters when the
    target pass reuses them in inference mode.
    """
    zc = backbone.embed(task.context_images, "adaptive")
    parts, labels = [head.logits(zc)], [task.context_labels]
    if task.M:
        zt = backbone.embed(task.target_images, "inference")
        parts.append(head.logits(zt))
        labels.append(task.target_labels)
    return T.cross_entropy(T.concat(parts, axis=0), np.concatenate(labels))


def meta_train(backbone: Backbone, config: TrainerConfig, sampler: TaskSampler,
               train_log: Optional[TrainLog] = None) -> list[Tensor]:
    """Train the adapter parameters; the body weights stay frozen."""
    params = backbone.adapter_parameters()
    if not params:
        raise ValueError("backbone has no trainable adapters")
    if any(t.requires_grad for t in backbone.theta()):
        raise ValueError("backbone weights must be frozen before meta-training")
    train_log = train_log if train_log is not None else TrainLog()
    opt = Adam(params)
    body_lr = config.body_schedule()
    head_rng = stream(config.seed, "meta_train.head_batches")
    accum = [np.zeros_like(p.data) for p in params]
    pending, losses, update = 0, [], 0
    limit = config.max_skip_fraction * config.total_tasks

    def flush():
        nonlocal pending, losses, update
        for p, g in zip(params, accum):
            p.grad = (g / pending).astype(p.data.dtype)
        opt.step(body_lr(update))
        train_log.rows.append((update, float(np.mean(losses)), train_log.skipped))
        update += 1
        for g in accum:
            g[...] = 0
        pending, losses = 0, []

    for t in range(config.total_tasks):
        task = sampler.sample()
        try:
            buf = context_buffer(backbone, task)
            head = fit_head(buf, config.inner_steps, config.inner_batch, config.head_schedule(), head_rng, task.way)
            for p in params:
                p.grad = None
            loss = outer_loss(backbone, head, task)
            loss.backward()
        except T.NonFiniteError as e:
            train_log.skipped += 1
            log.warning("skipping task %d: %s", t, e)
            for p in params:
                p.grad = None
            if train_log.skipped > limit:
                raise TrainingAborted(f"{train_log.skipped} of {t + 1} tasks skipped for non-finite values") from e
            continue
        finally:
            backbone.set_mode("adaptive")
        for g, p in zip(accum, params):
            if p.grad is not None:
                g += p.grad
            p.grad = None
        pending += 1
        losses.append(loss.item())
        if pending == config.tasks_per_outer_update:
            flush()
    if pending:
        flush()
    return params


@dataclass
class Prediction:
    labels: np.ndarray
    logits: np.ndarray
    head: Optional[LinearHead] = None


def adapt_and_predict(backbone: Backbone, task: Task, config: TrainerConfig,
                      rng: Optional[np.random.Generator] = None) -> Prediction:
    """Context forward (adaptive), head fit, target forward (inference)."""
    rng = rng if rng is not None else stream(config.seed, "adapt.head_batches")
    buf = context_buffer(backbone, task)
    head = fit_head(buf, config.inner_steps, config.inner_batch, config.head_schedule(), rng, task.way)
    if task.M == 0:
        return Prediction(np.zeros(0, np.int64), np.zeros((0, task.way)), head)
    with T.no_grad():
        zt = backbone.embed(task.target_images, "inference")
    logits = predict(head, zt)
    return Prediction(logits.argmax(axis=1), logits, head)


def run_baseline(backbone: Backbone, config: BaselineConfig, task: Task, trainer: TrainerConfig,
                 rng: Optional[np.random.Generator] = None) -> Prediction:
    rng = rng if rng is not None else stream(trainer.seed, "adapt.head_batches")
    if config.mode == "head_only":
        with T.no_grad():
            zc = backbone.features(task.context_images, adapter_mode=None)
        buf = EmbeddingBuffer(zc.data, task.context_labels)
        head = fit_head(buf, trainer.inner_steps, trainer.inner_batch, trainer.head_schedule(), rng, task.way)
        if task.M == 0:
            return Prediction(np.zeros(0, np.int64), np.zeros((0, task.way)), head)
        with T.no_grad():
            zt = backbone.features(task.target_images, adapter_mode=None)
        logits = predict(head, zt)
        return Prediction(logits.argmax(axis=1), logits, head)

    net = backbone.clone()
    net.unfreeze()
    d = net.spec.embedding_dim
    w = Tensor(np.zeros((task.way, d)), requires_grad=True, name="finetune.head.weight")
    b = Tensor(np.zeros(task.way), requires_grad=True, name="finetune.head.bias")
    opt = Adam(net.trainable_theta() + [w, b])
    before = net.forward_count
    n = task.N
    for step in range(config.finetune_steps):
        idx = rng.integers(0, n, size=min(trainer.inner_batch, n))
        z = net.features(task.context_images[idx], adapter_mode=None)
        loss = T.cross_entropy(T.linear(z, w, b), task.context_labels[idx])
        loss.backward()
        opt.step(config.finetune_lr)
    net.freeze()
    head = LinearHead(w.data.copy(), b.data.copy())
    backbone.forward_count += net.forward_count - before
    if task.M == 0:
        return Prediction(np.zeros(0, np.int64), np.zeros((0, task.way)), head)
    with T.no_grad():
        zt = net.features(task.target_images, adapter_mode=None)
    backbone.forward_count += 1
    logits = predict(head, zt)
    return Prediction(logits.argmax(axis=1), logits, head)


def evaluate(backbone: Backbone, sampler: TaskSampler, num_tasks: int, config: TrainerConfig,
             strategy: str = "uppercase", baseline: Optional[BaselineConfig] = None) -> EvalReport:
    """Accuracy over ``num_tasks`` tasks drawn from ``sampler``.

    ``strategy`` is ``uppercase`` (adapters as attached) or a baseline mode.
    Head mini-batches use a per-task stream so reports are reproducible.
    """
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    report = EvalReport([], [], [])
    for i in range(num_tasks):
        task = sampler.sample()
        rng = stream(config.seed, "eval.head_batches", i)
        if strategy == "uppercase":
            pred = adapt_and_predict(backbone, task, config, rng)
        else:
            pred = run_baseline(backbone, baseline or BaselineConfig(mode=strategy), task, config, rng)
        acc = float((pred.labels == task.target_labels).mean()) if task.M else 1.0
        report.accuracies.append(acc)
        report.ways.append(task.way)
        report.shots.append(int(task.shots.min()))
    backbone.set_mode("adaptive")
    return report
