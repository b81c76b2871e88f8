"""Command-line entry point.

Subcommands: gen-data, pretrain, run, sweep-fewshot, verify-tables, count-params.
Every ExperimentConfig field has a matching ``--flag``; values given on the
command line win over ``--config`` file values. FEDLORA_OUTPUT_DIR overrides
the output directory unless ``--output-dir`` is passed explicitly.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import accounting, checkpoint
from .errors import FedLoraError, ParseError
from .experiment import (
    CONFIG_FIELDS,
    ExperimentConfig,
    ExperimentResult,
    field_type,
    parse_config,
    pretrain_base,
    run_experiment,
    source_dataset,
    target_dataset,
)
from .model import ModelShape, count_params, evaluate
from .partition import make_partition, save_dataset, train_test_split

OUTPUT_ENV = "FEDLORA_OUTPUT_DIR"
METRIC_COLUMNS = (
    "round", "mode", "test_acc", "test_loss", "mean_train_loss",
    "bytes_up", "bytes_down", "cum_bytes", "train_ms", "eval_ms", "seed",
)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_config_flags(parser: argparse.ArgumentParser, require_seed: bool = False, exclude=()) -> None:
    parser.add_argument("--config", help="YAML file of config values")
    for name in CONFIG_FIELDS:
        if name in exclude:
            continue
        t = field_type(name)
        if name == "seed":
            parser.add_argument(_flag(name), dest=name, type=int, required=require_seed)
        elif t is bool:
            parser.add_argument(_flag(name), dest=name, nargs="?", const="true", default=None,
                                metavar="BOOL")
        else:
            # coercion and range checks happen in parse_config so errors share one format
            parser.add_argument(_flag(name), dest=name, default=None, metavar=t.__name__.upper())


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {name: getattr(args, name, None) for name in CONFIG_FIELDS}
    if overrides.get("output_dir") is None and os.environ.get(OUTPUT_ENV):
        overrides["output_dir"] = os.environ[OUTPUT_ENV]
    return parse_config(args.config, overrides)


def _num(x: float) -> str:
    return repr(float(x))


def metrics_csv(result: ExperimentResult) -> str:
    cfg = result.config
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for r in result.reports:
        # wall-clock columns stay blank unless asked for, so re-runs are byte-identical
        train_ms = f"{r.train_ms:.3f}" if cfg.wall_time else ""
        eval_ms = f"{r.eval_ms:.3f}" if cfg.wall_time else ""
        writer.writerow([
            r.round, r.mode, _num(r.test_acc), _num(r.test_loss), _num(r.mean_train_loss),
            r.bytes_up, r.bytes_down, r.cum_bytes, train_ms, eval_ms, cfg.seed,
        ])
    return buf.getvalue()


def summary_dict(result: ExperimentResult) -> dict:
    cfg = result.config
    payload_params = result.federation.payload.param_count
    return {
        "config_hash": cfg.config_hash(),
        "mode": cfg.mode,
        "seed": cfg.seed,
        "rounds": len(result.reports),
        "zero_shot_acc": result.zero_shot_acc,
        "zero_shot_loss": result.zero_shot_loss,
        "final_acc": result.final_acc,
        "final_loss": result.reports[-1].test_loss if result.reports else result.zero_shot_loss,
        "payload_params": payload_params,
        "payload_bytes": accounting.payload_bytes(payload_params, cfg.bytes_per_param),
        "total_bytes": result.total_bytes,
        "total_mb": accounting.to_mb(result.total_bytes),
    }


def run_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / f"{cfg.mode}-seed{cfg.seed}-{cfg.config_hash()}"


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from None


def write_run(result: ExperimentResult) -> Path:
    cfg = result.config
    out = run_dir(cfg)
    _write(out / "metrics.csv", metrics_csv(result))
    _write(out / "summary.json", json.dumps(summary_dict(result), indent=2, sort_keys=True) + "\n")
    _write(out / "config.json", json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
    partition = make_partition(
        train_test_split(target_dataset(cfg), cfg.test_fraction, cfg.seed).train, cfg.partition_spec()
    )
    _write(out / "partition.json", partition.manifest() + "\n")
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = config_from_args(args)
    data = target_dataset(replace(cfg, data_path=None))
    path = Path(args.out) if args.out else Path(cfg.output_dir) / f"data-seed{cfg.seed}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(path, data)
    print(f"wrote {path}: n={len(data)} K={data.num_classes} d_feat={data.d_feat}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = config_from_args(args)
    model = pretrain_base(cfg, source_dataset(cfg))
    target = train_test_split(target_dataset(cfg), cfg.test_fraction, cfg.seed)
    acc, loss = evaluate(model, target.test.features, target.test.labels)
    path = Path(args.out) if args.out else Path(cfg.output_dir) / f"base-seed{cfg.seed}.flck"
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save_model(path, model)
    print(f"wrote {path}")
    print(f"zero_shot_acc={acc!r} zero_shot_loss={loss!r}")
    return 0


def cmd_run(args) -> int:
    cfg = config_from_args(args)

    def progress(r):
        if not args.quiet:
            print(f"round {r.round:3d}  acc {r.test_acc:.4f}  loss {r.test_loss:.4f}  "
                  f"train {r.mean_train_loss:.4f}  cum {accounting.to_mb(r.cum_bytes):.3f} MB", file=sys.stderr)

    result = run_experiment(cfg, progress)
    out = write_run(result)
    s = summary_dict(result)
    print(f"{out}: zero_shot_acc={s['zero_shot_acc']:.4f} final_acc={s['final_acc']:.4f} "
          f"total_mb={s['total_mb']:.3f} hash={s['config_hash']}")
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ParseError(f"expected comma-separated integers, got {text!r}") from None


def fewshot_sweep(cfg: ExperimentConfig, shots: list[int], modes: list[str], seeds: list[int], progress=None) -> list[dict]:
    """One run per (shots, mode, seed); returns per-(shots, mode) mean final accuracy rows."""
    partition = cfg.partition if cfg.partition in ("fewshot_iid", "pathological") else "fewshot_iid"
    rows = []
    for k in shots:
        for mode in modes:
            accs = []
            for seed in seeds:
                cell = replace(cfg, shots=k, mode=mode, seed=seed, partition=partition)
                accs.append(run_experiment(cell).final_acc)
                if progress:
                    progress(k, mode, seed, accs[-1])
            rows.append({
                "shots": k, "mode": mode, "partition": partition, "seeds": len(seeds),
                "mean_acc": float(np.mean(accs)), "std_acc": float(np.std(accs)),
            })
    return rows


def cmd_sweep_fewshot(args) -> int:
    cfg = config_from_args(args)
    shots = _int_list(args.shots_list)
    if not shots:
        print("warning: empty shots list, nothing to run", file=sys.stderr)
        return 0
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        replace(cfg, mode=m)  # validates the mode name
    seeds = _int_list(args.seeds) if args.seeds else [cfg.seed + i for i in range(args.num_seeds)]

    def progress(k, mode, seed, acc):
        print(f"shots {k:3d}  {mode:6s}  seed {seed}  final_acc {acc:.4f}", file=sys.stderr)

    rows = fewshot_sweep(cfg, shots, modes, seeds, progress)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["shots", "mode", "partition", "seeds", "mean_acc", "std_acc"])
    for r in rows:
        writer.writerow([r["shots"], r["mode"], r["partition"], r["seeds"], _num(r["mean_acc"]), _num(r["std_acc"])])
    path = Path(cfg.output_dir) / f"fewshot-{cfg.config_hash()}.csv"
    _write(path, buf.getvalue())
    print(buf.getvalue(), end="")
    print(f"wrote {path}")
    return 0


def cmd_verify_tables(args=None, counter=count_params) -> int:
    report = accounting.reproduce_size_tables(counter=counter)
    print(report.render())
    if report.ok:
        print(f"ok: {len(report.rows)} cells matched")
        return 0
    for r in report.mismatches():
        print(f"- {r.table} {r.label}: expected {r.expected}", file=sys.stderr)
        print(f"+ {r.table} {r.label}: computed {r.computed}", file=sys.stderr)
    print(f"error[TABLE_MISMATCH]: {len(report.mismatches())} of {len(report.rows)} cells differ", file=sys.stderr)
    return 1


def cmd_count_params(args) -> int:
    cfg = config_from_args(args)
    mode = cfg.adaptation_mode()
    if args.reference:
        shape = accounting.reference_shape(cfg.num_classes)
        if mode.kind == "aa" and args.aa_width is None:
            mode = replace(mode, aa_width=accounting.CLIP_AA_WIDTH)
    else:
        shape = ModelShape.from_config(cfg.model_config())
    n = count_params(shape, mode)
    nbytes = accounting.payload_bytes(n, cfg.bytes_per_param)
    print(f"mode={mode.kind} params={n} bytes={nbytes} mb={accounting.to_mb(nbytes):.3f}")
    return 0


def _peek_config(path) -> dict:
    if not path:
        return {}
    try:
        import yaml

        loaded = yaml.safe_load(Path(path).read_text())
    except Exception:
        return {}  # parse_config reports the real problem
    return loaded if isinstance(loaded, dict) else {}


class _Parser(argparse.ArgumentParser):
    """Usage errors follow the same one-line ``error[CODE]`` format as runtime errors."""

    def error(self, message):
        self.exit(2, f"error[USAGE]: {self.prog}: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedlora", description="Federated LoRA simulator for dual encoders")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    add_config_flags(p)
    p.add_argument("--out", help="dataset path (default: <output-dir>/data-seed<seed>.csv)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train and save a base model checkpoint")
    add_config_flags(p)
    p.add_argument("--out", help="checkpoint path (default: <output-dir>/base-seed<seed>.flck)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="run one federated experiment")
    add_config_flags(p, require_seed=True)
    p.add_argument("--quiet", action="store_true", help="no per-round progress on stderr")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-fewshot", help="final accuracy per (shots, mode), averaged over seeds")
    add_config_flags(p, require_seed=True, exclude=("shots",))
    p.add_argument("--shots", dest="shots_list", default="1,2,4,8,16", help="comma-separated shot counts")
    p.add_argument("--modes", default="flora")
    p.add_argument("--seeds", help="comma-separated seeds (default: seed .. seed+num_seeds-1)")
    p.add_argument("--num-seeds", type=int, default=5)
    p.set_defaults(func=cmd_sweep_fewshot)

    p = sub.add_parser("verify-tables", help="recompute the parameter/size tables from shapes")
    p.set_defaults(func=cmd_verify_tables)

    p = sub.add_parser("count-params", help="count transferred parameters for a mode")
    add_config_flags(p)
    p.add_argument("--reference", action="store_true", help="use the ViT-B/32 CLIP reference shapes")
    p.set_defaults(func=cmd_count_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "sweep-fewshot":
        args.shots = None
        if args.mode is None and not _peek_config(args.config).get("mode"):
            args.mode = args.modes.split(",")[0].strip() or "flora"
    if args.command in ("gen-data", "pretrain", "count-params"):
        # seed and mode only matter for run/sweep; fill them unless a config file does
        file_values = _peek_config(args.config)
        if args.seed is None and "seed" not in file_values:
            args.seed = 0
        if args.mode is None and "mode" not in file_values:
            args.mode = "flora"
    try:
        return args.func(args)
    except FedLoraError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[IO]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
