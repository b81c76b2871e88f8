#!/usr/bin/env python3
"""Run every adaptation mode on the same task and tabulate accuracy vs bytes.

    python3 scripts/compare_modes.py --config configs/desk_default.yaml --seed 0
"""
import argparse
import dataclasses
import sys
import time

from fedlora import accounting
from fedlora.experiment import parse_config, run_experiment

MODES = ("flora", "aa", "lc", "vm_lc", "fft")


def main(argv=None):
    ap = argparse.ArgumentParser(description="accuracy and communication per adaptation mode")
    ap.add_argument("--config", default=None)
    ap.add_argument("--seed", type=int, required=True)
    ap.add_argument("--rounds", type=int, default=None)
    ap.add_argument("--modes", default=",".join(MODES))
    args = ap.parse_args(argv)

    overrides = {"seed": args.seed, "mode": "flora", "rounds": args.rounds}
    base = parse_config(args.config, overrides)
    print("mode\tpayload_params\tzero_shot_acc\tfinal_acc\ttotal_mb\tseconds")
    for mode in args.modes.split(","):
        cfg = dataclasses.replace(base, mode=mode.strip())
        start = time.perf_counter()
        result = run_experiment(cfg)
        elapsed = time.perf_counter() - start
        params = result.federation.payload.param_count
        print(f"{cfg.mode}\t{params}\t{result.zero_shot_acc:.4f}\t{result.final_acc:.4f}\t"
              f"{accounting.to_mb(result.total_bytes):.3f}\t{elapsed:.1f}")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
