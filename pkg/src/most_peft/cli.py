"""Command-line entry point.

Every command writes one JSON report into ``--out`` and appends a row to
``--out/runs.csv``. A ``--config`` JSON file supplies defaults for any option
(keys are option names with underscores); flags given on the command line
win. Exit codes: 0 ok, 2 usage/configuration, 3 I/O or file format, 4 numeric.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from . import harness as H
from .backbone import PROJECTIONS, Model, ModelConfig
from .errors import ConfigError, FormatError, MostError, NumericError, UsageError
from .io import (load_checkpoint, load_dataset, load_meta, model_entries, save_checkpoint,
                 save_dataset)
from .methods import apply_method, merge_model
from .numeric import get_precision, set_precision

log = logging.getLogger("most_peft")

METHODS = ("full", "linear-probe", "bitfit", "lora", "most")
CSV_FIELDS = ("command", "method", "seed", "trainable_params", "audit_params", "final_loss",
              "train_accuracy", "test_accuracy", "local_feature_distance", "wall_clock_s", "report")


# --------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, top: bool = True) -> None:
    # subcommands repeat the global flags with suppressed defaults so either
    # placement works without the subparser clobbering the top-level value
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=d(0), help="base seed (u64)")
    p.add_argument("--precision", choices=("f32", "f64"), default=d("f64"))
    p.add_argument("--config", default=d(None), help="JSON file of option defaults")
    p.add_argument("--out", default=d("runs"), help="report directory")


def _train_opts(p: argparse.ArgumentParser, epochs: int, lr: float) -> None:
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--warmup", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.25)


def _method_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=METHODS, default="most")
    p.add_argument("--b", type=int, default=8, help="Monarch block count")
    p.add_argument("--variant", default="full", help="full, I..VI, lowrank, kronecker, joint")
    p.add_argument("--rank", type=int, default=None,
                   help="LoRA rank (default: matched to most) or low-rank block rank")
    p.add_argument("--targets", nargs="+", default=list(PROJECTIONS))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="most-peft", description=__doc__.splitlines()[0])
    _common(parser)
    sub = parser.add_subparsers(dest="command", required=True)
    parser.commands = {}

    def add(name, help):
        p = sub.add_parser(name, help=help)
        _common(p, top=False)
        parser.commands[name] = p
        return p

    p = add("gen-data", "write a synthetic point-cloud dataset")
    p.add_argument("--task", choices=("source", "target"), default="source")
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--samples-per-class", type=int, default=40)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--path", required=True, help="dataset file to write")

    p = add("pretrain", "train the dense backbone on a source dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="checkpoint file to write")
    p.add_argument("--model", default=None, help="JSON object of ModelConfig overrides")
    _train_opts(p, 15, 1e-3)

    p = add("finetune", "adapt a pretrained checkpoint to a target dataset")
    p.add_argument("--ckpt", required=True, help="pretrained checkpoint (read only)")
    p.add_argument("--data", required=True)
    p.add_argument("--save", default=None, help="write the fine-tuned checkpoint here")
    _method_opts(p)
    _train_opts(p, 10, 3e-3)

    p = add("eval", "accuracy of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--test-fraction", type=float, default=0.25)

    p = add("diagnose", "local feature distance vs accuracy per checkpoint")
    p.add_argument("--ckpt", required=True, nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--test-fraction", type=float, default=0.25)

    p = add("bench", "FLOP model and wall time of dense vs Monarch apply")
    p.add_argument("--d", type=int, default=384)
    p.add_argument("--b", type=int, nargs="+", default=[1, 4, 8, 16])
    p.add_argument("--G", type=int, default=64)
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--repeats", type=int, default=20)

    p = add("audit-params", "closed-form trainable counts")
    p.add_argument("--model-shape", default="pointmae-like", help="toy or pointmae-like")
    p.add_argument("--method", choices=METHODS, default="most")
    p.add_argument("--b", type=int, default=32)
    p.add_argument("--variant", default="full")
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--classes", type=int, default=15)

    p = add("merge", "fold MoST deltas for inference and check fidelity")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("dropK", "exact"), default="dropK")
    p.add_argument("--data", default=None, help="dataset for the fidelity report")
    p.add_argument("--save", default=None, help="write the dropK-merged dense checkpoint")
    p.add_argument("--test-fraction", type=float, default=0.25)
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Two-pass parse: config-file values become defaults, explicit flags win."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        with open(args.config) as f:
            cfg = json.load(f)
    except OSError as e:
        raise FormatError(f"cannot read config {args.config}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {args.config} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    known = set(vars(args))
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise ConfigError(f"unknown config keys for {args.command}: {unknown}")
    common = {"seed", "precision", "out"}
    parser.set_defaults(**{k: v for k, v in cfg.items() if k in common})
    parser.commands[args.command].set_defaults(**{k: v for k, v in cfg.items() if k not in common})
    return parser.parse_args(argv)


# --------------------------------------------------------------------------
# helpers


def _echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items())}


def _load_split(path, cfg: ModelConfig, test_fraction: float):
    labels, clouds, n_classes = load_dataset(path)
    (ytr, ctr), (yte, cte) = D.split(labels, clouds, test_fraction)
    min_points = min(len(c) for c in clouds)
    if min_points < cfg.n_patches:
        raise ConfigError(f"dataset clouds have {min_points} points, model needs {cfg.n_patches}")
    return H.prepare(ytr, ctr, cfg), H.prepare(yte, cte, cfg), n_classes


def _tc(args) -> H.TrainConfig:
    return H.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                         weight_decay=args.weight_decay, warmup=args.warmup, seed=args.seed)


def load_model(path) -> Model:
    """Rebuild a model (with its adapters) from a checkpoint and its sidecar."""
    meta = load_meta(path)
    try:
        cfg = ModelConfig.from_dict(meta["model"])
    except (KeyError, TypeError) as e:
        raise FormatError(f"sidecar of {path} lacks a model config") from e
    model = Model.create(cfg, 0)
    m = meta.get("method", {"method": "full"})
    if m["method"] != "full":
        apply_method(model, m["method"], b=m.get("b", 8), variant=m.get("variant", "full"),
                     rank=m.get("rank"), seed=0, targets=m.get("targets", PROJECTIONS))
    model.load_state(load_checkpoint(path))
    return model


def _save_model(path, model: Model, method: dict, args) -> None:
    meta = {"model": model.cfg.to_dict(), "method": method, "config": _echo(args)}
    save_checkpoint(path, model_entries(model), meta)


def _write_report(args, report: dict, name: str) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.json"
    H.dump_json(report, path)
    row = {k: report.get(k, "") for k in CSV_FIELDS}
    row["command"] = args.command
    row["seed"] = args.seed
    row["final_loss"] = report["losses"][-1] if report.get("losses") else ""
    row["wall_clock_s"] = report.get("timing", {}).get("wall_clock_s", "")
    row["report"] = path.name
    csv_path = out / "runs.csv"
    new = not csv_path.exists()
    with open(csv_path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        if new:
            w.writeheader()
        w.writerow(row)
    log.info("wrote %s", path)
    return path


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> dict:
    if args.classes > len(D.SHAPES):
        raise ConfigError(f"at most {len(D.SHAPES)} classes")
    labels, clouds = D.generate(args.classes, args.samples_per_class, args.points, args.noise,
                                args.seed, args.task)
    meta = {"task": args.task, "classes": args.classes, "samples_per_class": args.samples_per_class,
            "points": args.points, "noise": args.noise, "seed": args.seed,
            "split": "every 4th class-interleaved round is test (test_fraction=0.25)"}
    save_dataset(args.path, labels, clouds, args.classes, meta)
    report = {"command": "gen-data", "path": str(args.path), "samples": len(labels),
              "label_histogram": np.bincount(labels, minlength=args.classes).tolist(),
              "seed": args.seed, "config": _echo(args)}
    _write_report(args, report, f"gen-data-{args.task}-s{args.seed}")
    return report


def cmd_pretrain(args) -> dict:
    overrides = json.loads(args.model) if isinstance(args.model, str) else (args.model or {})
    labels, _, n_classes = load_dataset(args.data)
    try:
        cfg = ModelConfig(**{**overrides, "n_classes": n_classes})
    except TypeError as e:
        raise ConfigError(f"bad model overrides: {e}") from e
    cfg.validate()
    train_set, test_set, _ = _load_split(args.data, cfg, args.test_fraction)
    model, report = H.pretrain(cfg, train_set, _tc(args), test_set, model_seed=args.seed)
    report["local_feature_distance"] = H.feature_distance(model, test_set)
    report["config"]["cli"] = _echo(args)
    _save_model(args.ckpt, model, {"method": "full"}, args)
    report["checkpoint"] = str(args.ckpt)
    _write_report(args, report, f"pretrain-s{args.seed}")
    return report


def cmd_finetune(args) -> dict:
    pretrained = load_model(args.ckpt)
    cfg = pretrained.cfg
    train_set, test_set, n_classes = _load_split(args.data, cfg, args.test_fraction)
    model, report = H.finetune(pretrained, train_set, test_set, args.method, _tc(args), b=args.b,
                               variant=args.variant, rank=args.rank, targets=tuple(args.targets),
                               n_classes=n_classes)
    report["config"]["cli"] = _echo(args)
    if report["trainable_params"] != report["audit_params"]:
        raise NumericError(f"trainable count {report['trainable_params']} disagrees with audit "
                           f"{report['audit_params']}")
    if args.save:
        method = {"method": args.method, "b": args.b, "variant": args.variant,
                  "rank": report["config"]["rank"], "targets": list(args.targets)}
        _save_model(args.save, model, method, args)
        report["checkpoint"] = str(args.save)
    _write_report(args, report, f"finetune-{args.method}-s{args.seed}")
    return report


def _eval_one(path, args):
    model = load_model(path)
    train_set, test_set, n_classes = _load_split(args.data, model.cfg, args.test_fraction)
    if n_classes != model.cfg.n_classes:
        raise ConfigError(f"dataset has {n_classes} classes, checkpoint head has {model.cfg.n_classes}")
    H.cache_tokens(model, train_set, test_set)
    return model, train_set, test_set


def cmd_eval(args) -> dict:
    model, train_set, test_set = _eval_one(args.ckpt, args)
    report = {"command": "eval", "checkpoint": str(args.ckpt), "method": model.method,
              "train_accuracy": H.accuracy(model, train_set),
              "test_accuracy": H.accuracy(model, test_set),
              "local_feature_distance": H.feature_distance(model, test_set),
              "seed": args.seed, "config": _echo(args)}
    _write_report(args, report, f"eval-{Path(args.ckpt).stem}")
    return report


def cmd_diagnose(args) -> dict:
    rows = []
    for path in args.ckpt:
        model, _, test_set = _eval_one(path, args)
        rows.append({"checkpoint": str(path), "method": model.method,
                     "local_feature_distance": H.feature_distance(model, test_set),
                     "test_accuracy": H.accuracy(model, test_set)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "diagnose.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    report = {"command": "diagnose", "rows": rows, "seed": args.seed, "config": _echo(args)}
    _write_report(args, report, "diagnose")
    return report


def cmd_bench(args) -> dict:
    dtype = np.float32 if args.precision == "f32" else np.float64
    rows = H.bench(args.d, args.b, args.G, args.repeats, args.K, args.seed, dtype)
    report = {"command": "bench", "rows": rows, "seed": args.seed, "config": _echo(args),
              "timing_note": "wall times are best-of-repeats seconds per apply"}
    _write_report(args, report, f"bench-d{args.d}")
    return report


def cmd_audit(args) -> dict:
    table = H.audit_table(args.model_shape, args.method, args.b, args.variant, args.rank,
                          args.classes)
    report = {"command": "audit-params", **table, "audit_params": table["total"],
              "seed": args.seed, "config": _echo(args)}
    _write_report(args, report, f"audit-{args.model_shape}-{args.method}-b{args.b}-{args.variant}")
    return report


def cmd_merge(args) -> dict:
    meta = load_meta(args.ckpt)
    model = load_model(args.ckpt)
    if meta.get("method", {}).get("method") != "most":
        raise UsageError("merge needs a checkpoint fine-tuned with method 'most'")
    report = {"command": "merge", "checkpoint": str(args.ckpt), "mode": args.mode,
              "method": model.method, "seed": args.seed, "config": _echo(args)}
    if args.data:
        _, test_set, _ = _eval_one(args.ckpt, args)
        report.update(H.merge_report(model, test_set))
    if args.save:
        if args.mode != "dropK":
            raise UsageError("only the dropK merge yields a plain dense checkpoint")
        merged = merge_model(model, "dropK")
        merged.method = "full"
        _save_model(args.save, merged, {"method": "full"}, args)
        report["merged_checkpoint"] = str(args.save)
    _write_report(args, report, f"merge-{Path(args.ckpt).stem}-{args.mode}")
    return report


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "bench": cmd_bench,
    "audit-params": cmd_audit,
    "merge": cmd_merge,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("MOST_LOG", "WARNING"),
                        format="%(levelname)s %(name)s: %(message)s")
    previous = get_precision()
    try:
        args = parse_args(argv)
        set_precision(args.precision)
        with np.errstate(invalid="raise", divide="raise", over="raise"):
            report = COMMANDS[args.command](args)
    except SystemExit as e:  # argparse usage errors exit with 2 already
        return int(e.code or 0)
    except MostError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FloatingPointError as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return NumericError.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return FormatError.exit_code
    except json.JSONDecodeError as e:
        print(f"error: bad JSON: {e}", file=sys.stderr)
        return ConfigError.exit_code
    finally:
        set_precision(previous)
    print(json.dumps({k: v for k, v in report.items() if k != "config"}, sort_keys=True,
                     default=str)[:2000])
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
