"""``cvattn`` command line: train, eval, verify, params, gen-data.

Exit codes: 0 success, 1 the run itself failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import os
import sys
from pathlib import Path

import torch

from . import verify
from .config import KERNELS, PRESETS, TASKS, VARIANTS, ConfigError, RunConfig, load_config, preset, set_key
from .model import build_model, count_parameters, load_checkpoint, save_checkpoint
from .tasks import SPLITS, export_dataset, generate, import_dataset
from .train import TrainingDiverged, evaluate, metrics_csv, torch_dtype, train_loop

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=PRESETS, default="toy")
    p.add_argument("--task", choices=TASKS, default=None,
                   help="task (default: from --config, else classification)")
    p.add_argument("--config", type=Path, help="INI config or JSON run manifest")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--kernel", choices=KERNELS)
    p.add_argument("--seed", type=int, help="training seed (initialization and batch order)")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvattn", description="Complex-valued attention transformer toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a run directory")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, help="run directory (default: runs/<config hash>)")

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True,
                   help="checkpoint directory (e.g. RUN/best); its run manifest supplies the config")
    p.add_argument("--config", type=Path, help="config or manifest (default: RUN/manifest.json)")
    p.add_argument("--data", type=Path, help="dataset file from gen-data (default: regenerate from config)")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--mode", choices=("teacher-forced", "autoregressive"), default="teacher-forced")
    p.add_argument("--out", type=Path, help="write the eval record here (default: next to the checkpoint)")

    p = sub.add_parser("verify", help="run the invariant and gradient suites")
    p.add_argument("--suite", choices=verify.SUITES, default="all")
    p.add_argument("--mutate", choices=("csgn",), help=argparse.SUPPRESS)

    p = sub.add_parser("params", help="parameter counts of complex, Yang and real models at matched width")
    _add_config_flags(p)
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True, help="output file")
    return parser


def _peek_task(path: Path) -> str | None:
    """The task named inside a config file, so the matching preset can be the base."""
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"cannot parse {path}: {exc}") from None
        return data.get("config", data).get("task", {}).get("task")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from None
    return parser.get("task", "task", fallback=None)


def resolve_config(args) -> RunConfig:
    task = args.task
    if task is None and args.config is not None:
        task = _peek_task(args.config)
    cfg = preset(args.preset, task or "classification")
    if args.config is not None:
        cfg = load_config(args.config, cfg)
    if args.task is not None:
        cfg.task.task = args.task
    for flag, section, key in (("variant", "model", "variant"), ("kernel", "model", "kernel"),
                               ("seed", "train", "seed"), ("precision", "train", "precision")):
        value = getattr(args, flag)
        if value is not None:
            set_key(getattr(cfg, section), section, key, value)
    for item in args.set:
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        if section not in ("model", "train", "task"):
            raise ConfigError(f"unknown config section [{section}]")
        set_key(getattr(cfg, section), section, key.strip(), value.strip())
    return cfg.resolve()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = args.out or Path("runs") / cfg.content_hash()[:12]
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": "train", "config": cfg.to_dict(), "config_hash": cfg.content_hash(),
                "seed": cfg.train.seed, "out": str(out)}
    _write_json(out / MANIFEST, manifest)
    data = generate(cfg.task)
    model = build_model(cfg.model, cfg.train.seed, torch_dtype(cfg.train.precision))
    result = train_loop(model, data, cfg.train, log=lambda msg: print(msg, flush=True))
    (out / "metrics.csv").write_bytes(metrics_csv(result.history).encode())
    save_checkpoint(model, out / "last")
    model.load_state_dict(result.best_state)
    save_checkpoint(model, out / "best")
    record = {"best_epoch": result.best_epoch, "test": result.test}
    _write_json(out / "test_metrics.json", record)
    print(json.dumps({"run": str(out), **record}, sort_keys=True))
    return EXIT_OK


def _run_dir(checkpoint: Path) -> Path:
    return checkpoint.parent if (checkpoint.parent / MANIFEST).exists() else checkpoint


def cmd_eval(args) -> int:
    ck = args.checkpoint
    if not (ck / "manifest.txt").is_file() or not (ck / "weights.bin").is_file():
        raise UsageError(f"no checkpoint at {ck} (expected manifest.txt and weights.bin)")
    config_path = args.config or _run_dir(ck) / MANIFEST
    if not config_path.is_file():
        raise UsageError(f"config {config_path} not found; pass --config")
    task = _peek_task(config_path) or "classification"
    cfg = load_config(config_path, preset("toy", task)).resolve()
    if args.mode == "autoregressive" and cfg.task.task != "sequence":
        raise UsageError("autoregressive evaluation needs a sequence-task checkpoint")
    if args.data is not None:
        if not args.data.is_file():
            raise UsageError(f"dataset file {args.data} not found")
        data, spec = import_dataset(args.data)
        if spec.task != cfg.task.task:
            raise UsageError(f"dataset task {spec.task!r} does not match checkpoint task {cfg.task.task!r}")
    else:
        data = generate(cfg.task)
    dtype = torch_dtype(cfg.train.precision)
    model = build_model(cfg.model, cfg.train.seed, dtype)
    try:
        load_checkpoint(model, ck)
    except ValueError as exc:
        raise UsageError(f"checkpoint does not match config: {exc}") from None
    loss, ap = evaluate(model, data[args.split], cfg.train.batch_size, dtype, mode=args.mode)
    record = {"checkpoint": str(ck), "split": args.split, "mode": args.mode, "loss": loss, "micro_ap": ap}
    line = json.dumps(record, sort_keys=True)
    print(line)
    out = args.out or ck / f"eval-{args.split}-{args.mode}.json"
    out.write_text(line + "\n")
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.mutate:
        with verify.mutate(args.mutate):
            results = verify.run_suite(args.suite)
    else:
        results = verify.run_suite(args.suite)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {total:.1f}s")
    return EXIT_FAILURE if failed else EXIT_OK


def parameter_report(cfg: RunConfig) -> dict[str, dict[str, int]]:
    """Counts for the configured width as a complex model, Yang variant and real baseline."""
    base = cfg.model.variant if cfg.model.variant not in ("real", "yang") else "catt"
    kernel = cfg.model.kernel
    report = {}
    for label, variant, k in (("complex", base, kernel), ("yang", "yang", "qkt"), ("real", "real", "dot")):
        model_cfg = dataclasses.replace(cfg.model, variant=variant, kernel=k)
        # shapes only: nothing is allocated on the meta device
        with torch.device("meta"):
            model = build_model(model_cfg, 0, torch.float32)
        report[label] = count_parameters(model)
    return report


def cmd_params(args) -> int:
    cfg = resolve_config(args)
    report = parameter_report(cfg)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_OK
    blocks = sorted({b for counts in report.values() for b in counts if b != "total"})
    print(f"{'block':<12}" + "".join(f"{name:>14}" for name in report))
    for b in blocks + ["total"]:
        print(f"{b:<12}" + "".join(f"{counts.get(b, 0):>14,}" for counts in report.values()))
    t = {k: v["total"] for k, v in report.items()}
    holds = t["real"] > t["complex"] >= t["yang"]
    print(f"ordering real > complex >= yang: {'holds' if holds else 'VIOLATED'}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    data = generate(cfg.task)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    export_dataset(data, cfg.task, args.out)
    sizes = {name: len(ds) for name, ds in data.items()}
    print(json.dumps({"out": str(args.out), "task": cfg.task.task, "splits": sizes}, sort_keys=True))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "verify": cmd_verify, "params": cmd_params,
            "gen-data": cmd_gen_data}


def _apply_threads() -> None:
    raw = os.environ.get("CVATTN_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"CVATTN_THREADS must be a positive integer, got {raw!r}") from None
    torch.set_num_threads(n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    try:
        _apply_threads()
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"cvattn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"cvattn {args.command}: run failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"cvattn {args.command}: run failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
