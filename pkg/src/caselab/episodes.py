"""Episodic task sampling over synthetic glyph domains or class-folder datasets.

The synthetic benchmark has six procedurally rendered domains. Domains 0-3
(bars, crosses, rings, checkers) are used for pretraining and meta-training;
domains 4-5 (gradients, dot grids) are held out for meta-testing. Each task
also draws a shared capture condition applied to every image in that task:
contrast, brightness, colour cast, sensor noise, and one colour channel with
much heavier noise than the others.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .backbone import ArrayDataset

GLYPHS = ("bars", "crosses", "rings", "checkers", "gradients", "dotgrid")
TRAIN_DOMAINS = (0, 1, 2, 3)
TEST_DOMAINS = (4, 5)


class SamplingError(ValueError):
    pass


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# synthetic glyphs

def _soft(x: np.ndarray, sharp: float = 12.0) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(sharp * x))


def _glyph_field(kind: str, p: dict, u: np.ndarray, v: np.ndarray, thick: float) -> np.ndarray:
    if kind == "bars":
        t = np.abs(np.mod(p["freq"] * u + p["phase"], 1.0) - 0.5)
        return _soft((p["width"] * thick - t) / 0.15)
    if kind == "crosses":
        out = np.zeros_like(u)
        for ang in p["arms"]:
            c, s = np.cos(ang), np.sin(ang)
            along, perp = c * u + s * v, -s * u + c * v
            out = np.maximum(out, _soft((0.12 * thick * p["width"] - np.abs(perp)) / 0.06) * _soft((p["length"] - np.abs(along)) / 0.1))
        return out
    if kind == "rings":
        r = np.sqrt(u * u + v * v) * p["squash"]
        t = np.abs(np.mod(p["freq"] * r + p["phase"], 1.0) - 0.5)
        return _soft((p["width"] * thick - t) / 0.15)
    if kind == "checkers":
        return _soft(np.sin(np.pi * p["fx"] * u) * np.sin(np.pi * p["fy"] * v) / 0.3)
    if kind == "gradients":
        ramp = 0.5 + p["slope"] * u + p["curve"] * (u * u + v * v - 0.6)
        return np.clip(ramp, 0.0, 1.0) ** p["gamma"]
    if kind == "dotgrid":
        du = np.mod(p["pitch"] * u + 0.5, 1.0) - 0.5
        dv = np.mod(p["pitch"] * v * p["aspect"] + 0.5, 1.0) - 0.5
        return _soft((p["radius"] * thick - np.sqrt(du * du + dv * dv)) / 0.08)
    raise ValueError(f"unknown glyph {kind!r}")


def _class_params(kind: str, rng: np.random.Generator) -> dict:
    p = {"angle": rng.uniform(0, np.pi), "fg": rng.uniform(0.0, 1.0, 3), "bg": rng.uniform(0.0, 1.0, 3)}
    if kind == "bars":
        p.update(freq=rng.uniform(1.0, 4.5), phase=rng.uniform(0, 1), width=rng.uniform(0.12, 0.3))
    elif kind == "crosses":
        n = int(rng.integers(2, 5))
        p.update(arms=tuple(np.sort(rng.uniform(0, np.pi, n))), width=rng.uniform(0.6, 1.4), length=rng.uniform(0.4, 0.9))
    elif kind == "rings":
        p.update(freq=rng.uniform(1.0, 4.0), phase=rng.uniform(0, 1), width=rng.uniform(0.12, 0.3), squash=rng.uniform(0.7, 1.3))
    elif kind == "checkers":
        p.update(fx=rng.uniform(1.0, 5.0), fy=rng.uniform(1.0, 5.0))
    elif kind == "gradients":
        p.update(slope=rng.uniform(0.3, 0.9), curve=rng.uniform(-0.6, 0.6), gamma=rng.uniform(0.5, 2.0))
    elif kind == "dotgrid":
        p.update(pitch=rng.uniform(1.5, 4.0), aspect=rng.uniform(0.7, 1.4), radius=rng.uniform(0.15, 0.35))
    return p


@dataclass
class SyntheticDomain:
    """One glyph family with a fixed class table and domain-level shift."""

    domain_id: int
    num_classes: int = 24
    resolution: int = 32
    seed: int = 0
    rotation: float = 0.0
    invert: bool = False
    noise: float = 0.02
    thickness: float = 1.0
    instances_per_class: int = 1000
    class_colors: bool = True
    color_jitter: float = 0.25
    classes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.kind = GLYPHS[self.domain_id % len(GLYPHS)]
        rng = np.random.default_rng([self.seed, 7919, self.domain_id])
        self.classes = [_class_params(self.kind, rng) for _ in range(self.num_classes)]
        lin = (np.arange(self.resolution) + 0.5) / self.resolution * 2 - 1
        self._v, self._u = np.meshgrid(lin, lin, indexing="ij")

    def class_count(self) -> int:
        return self.num_classes

    def instance_count(self, cls: int) -> int:
        return self.instances_per_class

    def render(self, cls: int, instance: int) -> np.ndarray:
        """3 x R x R image in [0, 1]; a pure function of (domain, class, instance)."""
        p = self.classes[cls]
        rng = np.random.default_rng([self.seed, self.domain_id, cls, instance])
        ang = p["angle"] + self.rotation + rng.normal(0, 0.15)
        scale = rng.uniform(0.85, 1.15)
        tx, ty = rng.uniform(-0.2, 0.2, 2)
        u0, v0 = (self._u - tx) * scale, (self._v - ty) * scale
        c, s = np.cos(ang), np.sin(ang)
        u, v = c * u0 + s * v0, -s * u0 + c * v0
        f = _glyph_field(self.kind, p, u, v, self.thickness)
        if self.class_colors:
            fg = np.clip(p["fg"] + rng.normal(0, self.color_jitter, 3), 0, 1)
            bg = np.clip(p["bg"] + rng.normal(0, self.color_jitter, 3), 0, 1)
        else:
            fg, bg = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        img = bg[:, None, None] * (1 - f) + fg[:, None, None] * f
        if self.invert:
            img = 1.0 - img
        img = img + rng.normal(0, self.noise, img.shape)
        return np.clip(img, 0, 1).astype(np.float32)


def default_domains(seed: int = 0, resolution: int = 32, num_classes: int = 24) -> list[SyntheticDomain]:
    shifts = [
        dict(),
        dict(thickness=1.2),
        dict(rotation=0.3),
        dict(noise=0.04),
        dict(invert=True, thickness=0.9, noise=0.05),
        dict(rotation=0.7, thickness=1.3, noise=0.05),
    ]
    return [SyntheticDomain(i, num_classes, resolution, seed, **kw) for i, kw in enumerate(shifts)]


def base_dataset(domains: Sequence[SyntheticDomain], per_class: int, normalization=(0.5, 0.5),
                 instance_offset: int = 500_000) -> ArrayDataset:
    """Labelled pretraining set over every class of the given domains.

    Instance ids start at ``instance_offset`` so they never coincide with the
    ids the episodic sampler draws from.
    """
    imgs, labels, label = [], [], 0
    for d in domains:
        for c in range(d.class_count()):
            for i in range(per_class):
                imgs.append(d.render(c, instance_offset + i))
                labels.append(label)
            label += 1
    x = (np.stack(imgs) - normalization[0]) / normalization[1]
    return ArrayDataset(x.astype(np.float32), np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# disk datasets

def read_netpbm(path: Union[str, Path]) -> np.ndarray:
    """Decode a binary P5/P6 file to an H x W x ch uint8 array."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            if im.format != "PPM":
                raise DatasetError(f"{path}: not a PGM/PPM file")
            im.load()
            arr = np.asarray(im)
    except (OSError, SyntaxError) as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def write_netpbm(path: Union[str, Path], image: np.ndarray):
    """Write a [0, 1] float image (ch x H x W) as P5 (1 channel) or P6 (3 channels)."""
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0]).save(path, format="PPM")
    elif arr.shape[0] == 3:
        Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0))).save(path, format="PPM")
    else:
        raise DatasetError(f"cannot write {arr.shape[0]}-channel image as PGM/PPM")


@dataclass
class DiskDataset:
    """Class-folder image dataset decoded eagerly into memory.

    Images are stored in [0, 1]; normalization happens when tasks are built.
    """

    root: Path
    class_names: list[str]
    images: list[np.ndarray]  # per class: n x ch x R x R

    def class_count(self) -> int:
        return len(self.class_names)

    def instance_count(self, cls: int) -> int:
        return len(self.images[cls])

    def render(self, cls: int, instance: int) -> np.ndarray:
        return self.images[cls][instance]

    @property
    def domain_id(self) -> int:
        return -1


IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm")


def load_disk_dataset(root: Union[str, Path], resolution: int = 32, channels: int = 3) -> DiskDataset:
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    manifest = root / "manifest.txt"
    if manifest.exists():
        names = [ln.strip() for ln in manifest.read_text(encoding="utf-8").splitlines() if ln.strip()]
    else:
        names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not names:
        raise DatasetError(f"no class directories under {root}")
    per_class = []
    for name in names:
        cdir = root / name
        if not cdir.is_dir():
            raise DatasetError(f"class directory {cdir} missing")
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"class {name!r} has no images")
        imgs = []
        for f in files:
            arr = read_netpbm(f)
            if arr.shape[:2] != (resolution, resolution):
                mode = "L" if arr.shape[2] == 1 else "RGB"
                im = Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr, mode=mode)
                arr = np.asarray(im.resize((resolution, resolution), Image.BILINEAR))
                if arr.ndim == 2:
                    arr = arr[:, :, None]
            x = arr.astype(np.float32).transpose(2, 0, 1) / 255.0
            if x.shape[0] == 1 and channels == 3:
                x = np.repeat(x, 3, axis=0)
            elif x.shape[0] == 3 and channels == 1:
                x = x.mean(axis=0, keepdims=True)
            imgs.append(x)
        per_class.append(np.stack(imgs))
    return DiskDataset(root, names, per_class)


# ---------------------------------------------------------------------------
# tasks

@dataclass
class Task:
    context_images: np.ndarray
    context_labels: np.ndarray
    target_images: np.ndarray
    target_labels: np.ndarray
    way: int
    domain_id: int
    context_ids: list = field(default_factory=list)
    target_ids: list = field(default_factory=list)
    classes: tuple = ()

    @property
    def shots(self) -> np.ndarray:
        return np.bincount(self.context_labels, minlength=self.way)

    @property
    def N(self) -> int:
        return len(self.context_labels)

    @property
    def M(self) -> int:
        return len(self.target_labels)

    @classmethod
    def from_arrays(cls, context_images, context_labels, target_images, target_labels, domain_id: int = -1) -> "Task":
        """Build a task, computing the way from the context labels."""
        context_labels = np.asarray(context_labels, dtype=np.int64)
        way = int(context_labels.max()) + 1
        if set(np.unique(context_labels)) != set(range(way)):
            raise SamplingError("context labels must cover every class in [0, way)")
        return cls(np.asarray(context_images, dtype=np.float32), context_labels,
                   np.asarray(target_images, dtype=np.float32), np.asarray(target_labels, dtype=np.int64),
                   way, domain_id)


@dataclass
class SamplerConfig:
    way_min: int = 5
    way_max: int = 5
    shot_min: int = 1
    shot_max: int = 5
    target_per_class: int = 5
    seed: int = 0
    variable_way: bool = False
    variable_shot: bool = False
    task_conditions: bool = True
    contrast_min: float = 0.35
    noise_max: float = 0.25
    cast_max: float = 0.25
    # one colour channel per task carries extra sensor noise of this strength
    channel_noise_min: float = 0.3
    channel_noise_max: float = 0.7
    normalization: tuple = (0.5, 0.5)

    def __post_init__(self):
        if not (1 <= self.way_min <= self.way_max) or not (1 <= self.shot_min <= self.shot_max):
            raise ValueError("way and shot ranges must be non-empty and positive")
        if self.target_per_class < 0:
            raise ValueError("target_per_class must be >= 0")
        if not 0 <= self.channel_noise_min <= self.channel_noise_max:
            raise ValueError("channel noise range must be non-negative and ordered")


def apply_condition(images: np.ndarray, cond: dict, rng: np.random.Generator) -> np.ndarray:
    """Shared per-task capture condition on [0, 1] images."""
    x = (images - 0.5) * cond["contrast"] + 0.5 + cond["brightness"]
    x = x + cond["cast"][None, :, None, None]
    x = x + rng.normal(0, cond["noise"], x.shape)
    if x.shape[1] > 1:
        ch = cond["noisy_channel"]
        x[:, ch] += rng.normal(0, cond["channel_noise"], x[:, ch].shape)
    return np.clip(x, 0, 1).astype(np.float32)


class TaskSampler:
    """Deterministic task stream: task ``i`` depends only on (config, i)."""

    def __init__(self, config: SamplerConfig, sources: Sequence, name: str = ""):
        if not sources:
            raise SamplingError("sampler needs at least one domain")
        self.config = config
        self.sources = list(sources)
        self.name = name
        self.index = 0
        for s in self.sources:
            if s.class_count() < config.way_max:
                raise SamplingError(
                    f"domain {s.domain_id} has {s.class_count()} classes, need {config.way_max} for max way")

    def _rng(self, index: int) -> np.random.Generator:
        from .rng import stream_key
        return np.random.default_rng([self.config.seed, stream_key(self.name or "tasks"), index])

    def sample(self) -> Task:
        t = self.task_at(self.index)
        self.index += 1
        return t

    def __iter__(self):
        while True:
            yield self.sample()

    def task_at(self, index: int) -> Task:
        cfg = self.config
        rng = self._rng(index)
        src_idx = int(rng.integers(len(self.sources)))
        src = self.sources[src_idx]
        way = int(rng.integers(cfg.way_min, cfg.way_max + 1)) if cfg.variable_way else cfg.way_max
        classes = rng.choice(src.class_count(), size=way, replace=False)
        if cfg.variable_shot:
            shots = rng.integers(cfg.shot_min, cfg.shot_max + 1, size=way)
        else:
            shots = np.full(way, int(rng.integers(cfg.shot_min, cfg.shot_max + 1)))
        ctx, ctx_y, ctx_ids, tgt, tgt_y, tgt_ids = [], [], [], [], [], []
        for label, (c, k) in enumerate(zip(classes, shots)):
            need = int(k) + cfg.target_per_class
            avail = src.instance_count(int(c))
            if avail < need:
                raise SamplingError(f"class {int(c)} of domain {src.domain_id} has {avail} instances, needs {need}")
            inst = rng.choice(avail, size=need, replace=False)
            for j, i in enumerate(inst):
                img = src.render(int(c), int(i))
                key = (src.domain_id, int(c), int(i))
                if j < k:
                    ctx.append(img), ctx_y.append(label), ctx_ids.append(key)
                else:
                    tgt.append(img), tgt_y.append(label), tgt_ids.append(key)
        ctx_x = np.stack(ctx)
        tgt_x = np.stack(tgt) if tgt else np.zeros((0,) + ctx_x.shape[1:], np.float32)
        if cfg.task_conditions:
            cond = {
                "contrast": rng.uniform(cfg.contrast_min, 1.0),
                "brightness": rng.uniform(-0.15, 0.15),
                "cast": rng.uniform(-cfg.cast_max, cfg.cast_max, ctx_x.shape[1]),
                "noise": rng.uniform(0.0, cfg.noise_max),
                "noisy_channel": int(rng.integers(ctx_x.shape[1])),
                "channel_noise": rng.uniform(cfg.channel_noise_min, cfg.channel_noise_max),
            }
            ctx_x = apply_condition(ctx_x, cond, rng)
            tgt_x = apply_condition(tgt_x, cond, rng)
        m, s = cfg.normalization
        return Task(((ctx_x - m) / s).astype(np.float32), np.asarray(ctx_y, np.int64),
                    ((tgt_x - m) / s).astype(np.float32), np.asarray(tgt_y, np.int64),
                    way, src.domain_id, ctx_ids, tgt_ids, tuple(int(c) for c in classes))


def sample_task(config: SamplerConfig, domain, index: int = 0) -> Task:
    return TaskSampler(config, [domain] if not isinstance(domain, (list, tuple)) else domain).task_at(index)
