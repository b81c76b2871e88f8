#!/usr/bin/env python3
"""Seed sweep behind the desk-scale learning threshold.

For each seed, runs the default FLoRA experiment and prints the zero-shot and
final accuracy, the gain in percentage points and the ratio of the last to the
first round's mean train loss. This is the oracle run the +20pp / 50% loss
thresholds were checked against before they were frozen.

    python3 scripts/calibrate_learning.py --seeds 0,1,2,3,4
"""
import argparse
import time

from fedlora.experiment import parse_config, run_experiment


def main(argv=None):
    ap = argparse.ArgumentParser(description="per-seed learning margin of the default FLoRA run")
    ap.add_argument("--config", default=None)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--mode", default="flora")
    args = ap.parse_args(argv)

    print("seed\tzero_shot\tfinal\tgain_pp\tloss_ratio\tseconds")
    worst = None
    for seed in (int(s) for s in args.seeds.split(",")):
        cfg = parse_config(args.config, {"seed": seed, "mode": args.mode})
        start = time.perf_counter()
        res = run_experiment(cfg)
        gain = 100 * (res.final_acc - res.zero_shot_acc)
        ratio = res.reports[-1].mean_train_loss / res.reports[0].mean_train_loss
        print(f"{seed}\t{res.zero_shot_acc:.4f}\t{res.final_acc:.4f}\t{gain:.1f}\t{ratio:.3f}\t{time.perf_counter() - start:.1f}")
        worst = gain if worst is None else min(worst, gain)
    print(f"# smallest gain {worst:.1f}pp")


if __name__ == "__main__":
    main()
