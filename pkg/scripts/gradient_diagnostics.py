#!/usr/bin/env python3
"""Compare autodiff gradients against central and extrapolated differences.

Rebuilds the random LoRA configs of the acceptance gradient check and reports,
per config, the worst relative error of the plain central difference at
step h and of a Richardson-extrapolated difference (steps h and h/2). If the
autodiff gradient is right, the first shrinks like h**2 and the second sits
near rounding level.

    python3 scripts/gradient_diagnostics.py --configs 100 --tau 0.01
"""
import argparse

import numpy as np

from fedlora.model import AdaptationMode, ModelConfig, build_model, loss_graph
from fedlora.numerics import forward


def make_case(seed, tau):
    rng = np.random.default_rng([seed, 4])
    cfg = ModelConfig(
        d_feat=int(rng.integers(2, 17)), dim=int(rng.integers(2, 17)),
        image_blocks=int(rng.integers(1, 3)), text_blocks=int(rng.integers(1, 3)),
        num_classes=int(rng.integers(2, 6)), tau=tau,
    )
    targets = [("text",), ("image",), ("image", "text")][seed % 3]
    model = build_model(cfg, AdaptationMode("flora", targets, int(rng.integers(1, 4)), float(rng.uniform(0.5, 4.0))), seed)
    for name in model.lora_names():
        if name.endswith(".B"):
            model.params[name] = rng.normal(0.0, 0.1, model.params[name].shape)
    x, y = rng.normal(size=(4, cfg.d_feat)), rng.integers(0, cfg.num_classes, 4)
    return model, x, y


def errors(model, x, y, h):
    build = lambda t, n: loss_graph(t, n, model, x, y)  # noqa: E731
    ad = forward(build, model.params).backward()

    def loss(p):
        return forward(build, p, trainable=()).loss.value[0, 0]

    def central(name, idx, step):
        plus, minus = model.params[name].copy(), model.params[name].copy()
        plus[idx] += step
        minus[idx] -= step
        return (loss({**model.params, name: plus}) - loss({**model.params, name: minus})) / (2 * step)

    plain = rich = 0.0
    where = None
    for name in sorted(model.params):
        for idx in np.ndindex(model.params[name].shape):
            g_h, g_half = central(name, idx, h), central(name, idx, h / 2)
            g_rich = (4 * g_half - g_h) / 3
            e = abs(ad[name][idx] - g_h) / max(1.0, abs(g_h))
            if e > plain:
                plain, where = e, (name, idx)
            rich = max(rich, abs(ad[name][idx] - g_rich) / max(1.0, abs(g_rich)))
    return plain, rich, where


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--configs", type=int, default=100)
    ap.add_argument("--tau", type=float, default=0.01)
    ap.add_argument("--h", type=float, default=1e-4)
    ap.add_argument("--show", type=int, default=10, help="print the configs with the largest plain error")
    args = ap.parse_args()

    rows = []
    for seed in range(args.configs):
        model, x, y = make_case(seed, args.tau)
        plain, rich, where = errors(model, x, y, args.h)
        rows.append((plain, rich, seed, where))
    rows.sort(reverse=True)
    print("seed\tcentral_err\trichardson_err\tworst_entry")
    for plain, rich, seed, where in rows[: args.show]:
        print(f"{seed}\t{plain:.3e}\t{rich:.3e}\t{where[0]}{list(where[1])}")
    plain_all = np.array([r[0] for r in rows])
    rich_all = np.array([r[1] for r in rows])
    print(f"# central h={args.h:g}: max {plain_all.max():.3e}, {int((plain_all > 1e-5).sum())} of {len(rows)} above 1e-5")
    print(f"# richardson: max {rich_all.max():.3e}, {int((rich_all > 1e-5).sum())} of {len(rows)} above 1e-5")


if __name__ == "__main__":
    main()
