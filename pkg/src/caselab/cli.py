"""Command-line entry point: pretrain, meta-train, evaluate, ablate, cost, gamma-stats.

Every command writes its artifacts into ``--out`` together with the fully
resolved configuration (``config.txt``). Exit codes: 0 success, 1 usage,
2 configuration, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Sequence

from . import checkpoint as ckpt
from .adapters import CaseConfig
from .backbone import Backbone, dump_gamma_stats, gamma_stats_csv, pretrain
from .config import ConfigError, RunConfig, format_config, load_config
from .cost import STRATEGIES, adaptation_cost, cost_csv, pareto_csv
from .episodes import TEST_DOMAINS, TRAIN_DOMAINS, TaskSampler, base_dataset, default_domains, load_disk_dataset
from .trainer import EvalReport, TrainLog, evaluate, meta_train

log = logging.getLogger("caselab")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

# strategy name used in reports -> adapter kind attached to the body
STRATEGY_ADAPTER = {"head_only": "none", "uppercase": "case", "se": "se", "film_lite": "film",
                    "full_finetune": "none"}


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# shared plumbing

@contextmanager
def output_dir(path: Path):
    """Create ``path`` and hold a lockfile in it for the duration of a command."""
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeFailure(f"output directory {path} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        lock.unlink(missing_ok=True)


def write_text(path: Path, text: str):
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def domains_for(cfg: RunConfig):
    doms = default_domains(cfg.seed, cfg.backbone.input_resolution, cfg.benchmark.num_classes)
    for d in doms:
        d.color_jitter = cfg.benchmark.color_jitter
    return doms


def train_sampler(cfg: RunConfig) -> TaskSampler:
    doms = domains_for(cfg)
    return TaskSampler(cfg.sampler_config(), [doms[i] for i in TRAIN_DOMAINS], name="meta_train")


def test_sampler(cfg: RunConfig) -> TaskSampler:
    if cfg.run.data_root:
        sources = [load_disk_dataset(cfg.run.data_root, cfg.backbone.input_resolution, cfg.backbone.input_channels)]
    else:
        doms = domains_for(cfg)
        sources = [doms[i] for i in TEST_DOMAINS]
    return TaskSampler(cfg.sampler_config(), sources, name="meta_test")


def build_pretrained(cfg: RunConfig) -> Backbone:
    doms = domains_for(cfg)
    base = base_dataset([doms[i] for i in TRAIN_DOMAINS], cfg.run.pretrain_per_class, cfg.sampler.normalization)
    return pretrain(cfg.backbone.spec(), base, cfg.run.pretrain_epochs, cfg.seed, cfg.run.pretrain_lr,
                    cfg.run.pretrain_batch)


def load_backbone(cfg: RunConfig, path: Optional[str], adapter: str = "none",
                  case: Optional[CaseConfig] = None) -> Backbone:
    """Body from a checkpoint (or freshly initialized adapters over it)."""
    if not path:
        raise UsageError("--checkpoint is required for this command")
    try:
        tensors = ckpt.load_checkpoint(path)
    except OSError as e:
        raise RuntimeFailure(f"cannot read checkpoint {path}: {e}") from e
    bb = Backbone(cfg.backbone.spec(), cfg.seed)
    if adapter != "none":
        bb.attach_adapters(adapter, case or cfg.case, cfg.seed, cfg.film.encoder_channels)
    has_adapters = any(n.startswith("adapter/") for n in tensors)
    if adapter != "none" and not has_adapters:
        bb.load_tensors({n: t for n, t in tensors.items() if not n.startswith("adapter/")}, strict=False)
        missing = [n for n in bb.named_tensors() if n.startswith("backbone/") and n not in tensors]
        if missing:
            raise RuntimeFailure(f"checkpoint lacks body tensors: {missing[:3]}")
    else:
        bb.load_tensors({n: t for n, t in tensors.items() if adapter != "none" or n.startswith("backbone/")},
                        strict=True)
    bb.freeze()
    return bb


def run_eval(cfg: RunConfig, bb: Backbone, strategy: str, num_tasks: int) -> EvalReport:
    mode = "uppercase" if strategy in ("uppercase", "se", "film_lite") else strategy
    baseline = dataclasses.replace(cfg.baseline, mode=mode) if mode != "uppercase" else None
    return evaluate(bb, test_sampler(cfg), num_tasks, cfg.trainer_config(), strategy=mode, baseline=baseline)


def summary_csv(rows: Sequence[tuple[str, EvalReport]]) -> str:
    lines = ["strategy,tasks,mean_accuracy,ci95"]
    for name, r in rows:
        lines.append(f"{name},{r.count},{r.mean:.6f},{r.ci95:.6f}")
    return "\n".join(lines) + "\n"


def meta_train_adapters(cfg: RunConfig, pretrained: Backbone, adapter: str, case: Optional[CaseConfig] = None,
                        total_tasks: Optional[int] = None) -> tuple[Backbone, TrainLog]:
    bb = pretrained.clone()
    bb.attach_adapters(adapter, case or cfg.case, cfg.seed, cfg.film.encoder_channels)
    tcfg = cfg.trainer_config()
    if total_tasks is not None:
        tcfg = dataclasses.replace(tcfg, total_tasks=total_tasks)
    train_log = TrainLog()
    if tcfg.total_tasks > 0:
        meta_train(bb, tcfg, train_sampler(cfg), train_log)
    return bb, train_log


# ---------------------------------------------------------------------------
# commands

def cmd_pretrain(cfg: RunConfig, args) -> int:
    bb = build_pretrained(cfg)
    ckpt.save_checkpoint(args.out / "pretrained.ckpt", {n: t.data for n, t in bb.named_tensors().items()})
    write_text(args.out / "pretrain.csv", f"epochs,base_accuracy\n{cfg.run.pretrain_epochs},{bb.base_accuracy:.6f}\n")
    log.info("base accuracy %.4f", bb.base_accuracy)
    return EXIT_OK


def cmd_metatrain(cfg: RunConfig, args) -> int:
    adapter = args.adapter or cfg.run.adapter
    if adapter == "none":
        raise ConfigError("meta-training needs run.adapter to be case, se or film")
    bb, train_log = meta_train_adapters(cfg, load_backbone(cfg, args.checkpoint), adapter)
    ckpt.save_checkpoint(args.out / f"meta_{adapter}.ckpt", {n: t.data for n, t in bb.named_tensors().items()})
    write_text(args.out / f"train_{adapter}.csv", train_log.to_csv())
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    strategy = args.strategy
    adapter = STRATEGY_ADAPTER[strategy]
    bb = load_backbone(cfg, args.checkpoint, adapter)
    n = args.tasks or cfg.run.eval_tasks
    report = run_eval(cfg, bb, strategy, n)
    write_text(args.out / f"eval_{strategy}.csv", report.to_csv())
    write_text(args.out / f"eval_{strategy}_summary.csv", summary_csv([(strategy, report)]))
    print(f"{strategy}: mean accuracy {report.mean:.4f} +/- {report.ci95:.4f} over {report.count} tasks")
    return EXIT_OK


def ablation_points(cfg: RunConfig) -> list[tuple[str, str, CaseConfig]]:
    base = cfg.case
    points = []
    for act in ("linear", "sigmoid", "sigmoid2"):
        points.append(("output_activation", act, dataclasses.replace(base, output_activation=act)))
    for n in cfg.ablate.hidden_layers:
        points.append(("hidden_layers", str(n), dataclasses.replace(base, hidden_layers=int(n))))
    for r in cfg.ablate.reductions:
        points.append(("reduction", str(r), dataclasses.replace(base, reduction=int(r))))
    for act in ("silu", "relu", "tanh"):
        points.append(("hidden_activation", act, dataclasses.replace(base, hidden_activation=act)))
    return points


def cmd_ablate(cfg: RunConfig, args) -> int:
    pretrained = load_backbone(cfg, args.checkpoint)
    lines = ["axis,value,output_activation,hidden_layers,reduction,min_units,hidden_activation,"
             "params_adaptive,tasks,mean_accuracy,ci95"]
    for axis, value, case in ablation_points(cfg):
        bb, _ = meta_train_adapters(cfg, pretrained, "case", case, total_tasks=cfg.ablate.meta_tasks)
        report = run_eval(cfg, bb, "uppercase", cfg.ablate.eval_tasks)
        params = sum(p.size for p in bb.adapter_parameters())
        lines.append(f"{axis},{value},{case.output_activation},{case.hidden_layers},{case.reduction},"
                     f"{case.min_units},{case.hidden_activation},{params},{report.count},"
                     f"{report.mean:.6f},{report.ci95:.6f}")
        log.info("ablate %s=%s accuracy %.4f", axis, value, report.mean)
    write_text(args.out / "ablate.csv", "\n".join(lines) + "\n")
    return EXIT_OK


def cost_reports(cfg: RunConfig):
    return [adaptation_cost(s, cfg.backbone.spec(), cfg.cost, cfg.case, cfg.film.encoder_channels)
            for s in STRATEGIES]


def cmd_cost(cfg: RunConfig, args) -> int:
    write_text(args.out / "cost.csv", cost_csv(cost_reports(cfg)))
    return EXIT_OK


def cmd_gamma_stats(cfg: RunConfig, args) -> int:
    if args.checkpoint:
        bb = load_backbone(cfg, args.checkpoint, "case")
    else:
        bb = Backbone(cfg.backbone.spec(), cfg.seed).attach_adapters("case", cfg.case, cfg.seed)
    sampler = test_sampler(cfg)
    tasks = [sampler.task_at(i) for i in range(args.tasks or cfg.run.eval_tasks)]
    write_text(args.out / "gamma_stats.csv", gamma_stats_csv(dump_gamma_stats(bb, tasks)))
    return EXIT_OK


def cmd_pipeline(cfg: RunConfig, args) -> int:
    """Pretrain, meta-train every adapter family, evaluate, cost, and emit pareto.csv."""
    out = args.out
    pretrained = build_pretrained(cfg)
    ckpt.save_checkpoint(out / "pretrained.ckpt", {n: t.data for n, t in pretrained.named_tensors().items()})
    write_text(out / "pretrain.csv", f"epochs,base_accuracy\n{cfg.run.pretrain_epochs},"
                                     f"{pretrained.base_accuracy:.6f}\n")
    n = cfg.run.eval_tasks
    reports, models = [], {}
    for strategy in ("head_only", "se", "uppercase", "film_lite", "full_finetune"):
        adapter = STRATEGY_ADAPTER[strategy]
        if adapter == "none":
            bb = pretrained
        else:
            bb, train_log = meta_train_adapters(cfg, pretrained, adapter)
            write_text(out / f"train_{adapter}.csv", train_log.to_csv())
            ckpt.save_checkpoint(out / f"meta_{adapter}.ckpt", {k: t.data for k, t in bb.named_tensors().items()})
            models[adapter] = bb
        report = run_eval(cfg, bb, strategy, n)
        write_text(out / f"eval_{strategy}.csv", report.to_csv())
        reports.append((strategy, report))
        log.info("%s accuracy %.4f +/- %.4f", strategy, report.mean, report.ci95)
    write_text(out / "eval_summary.csv", summary_csv(reports))
    costs = {r.strategy: r for r in cost_reports(cfg)}
    write_text(out / "cost.csv", cost_csv(list(costs.values())))
    write_text(out / "pareto.csv", pareto_csv([(s, r.mean, costs[s].macs_adaptation, costs[s].params_adaptive)
                                                for s, r in reports]))
    sampler = test_sampler(cfg)
    tasks = [sampler.task_at(i) for i in range(n)]
    write_text(out / "gamma_stats.csv", gamma_stats_csv(dump_gamma_stats(models["case"], tasks)))
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "meta-train": cmd_metatrain,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "cost": cmd_cost,
    "gamma-stats": cmd_gamma_stats,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="caselab", description="Few-shot adaptation with contextual channel scaling.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
        p.add_argument("--checkpoint", help="input checkpoint")
        if name in ("eval", "gamma-stats"):
            p.add_argument("--tasks", type=int, help="number of test tasks")
        if name == "eval":
            p.add_argument("--strategy", default="uppercase", choices=sorted(STRATEGY_ADAPTER))
        if name == "meta-train":
            p.add_argument("--adapter", choices=("case", "se", "film"))
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = cfg.with_seed(args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with output_dir(args.out):
            write_text(args.out / "config.txt", format_config(cfg))
            return COMMANDS[args.command](cfg, args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, ckpt.CheckpointError, KeyError, ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
