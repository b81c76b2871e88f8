"""Acceptance criteria, each at its stated tolerance.

Every test records a single PASS/FAIL line (shown in the terminal summary).
"""
import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest

from fedlora import accounting
from fedlora.accounting import ABLATION_TABLE, CostLedger, comm_cost_per_round, payload_bytes, to_mb
from fedlora.cli import main as cli_main
from fedlora.experiment import ExperimentConfig, base_params, run_experiment, setup
from fedlora.federation import TransferPayload, aggregate, train_centralized
from fedlora.model import (
    AdaptationMode,
    ModelConfig,
    ModelShape,
    build_model,
    count_params,
    forward_probs,
    loss_graph,
    predict,
)
from fedlora.numerics import finite_diff_check
from fedlora.partition import (
    Dataset,
    PartitionSpec,
    label_entropy,
    make_partition,
    pathological_class_assignment,
)

from test_partition import FEWSHOT_CLASS_ROWS


def test_01_lora_ablation_counts(criterion):
    start = time.perf_counter()
    got = {
        (enc, r): count_params(accounting.reference_shape(2), AdaptationMode("flora", (enc,), r))
        for enc, r in ABLATION_TABLE
    }
    elapsed = time.perf_counter() - start
    wrong = {k: (ABLATION_TABLE[k], v) for k, v in got.items() if v != ABLATION_TABLE[k]}
    ok = not wrong and elapsed < 1.0
    criterion(1, ok, f"{12 - len(wrong)}/12 ablation cells exact in {elapsed:.3f}s"
              + (f"; mismatches (printed, computed): {wrong}" if wrong else ""))
    assert ok


def test_02_transfer_sizes(criterion):
    start = time.perf_counter()
    cases = [
        ("FLoRA", 24_576, 0.094),
        ("FedFFT", 151_277_313, 577.078),
        ("FedAA", 525_312, 2.004),
        ("FedLC K=2", 1_026, 0.004),
        ("FedLC K=397", 203_661, 0.777),
    ]
    shapes = {
        "FLoRA": count_params(accounting.reference_shape(2), AdaptationMode("flora", ("text",), 2)),
        "FedFFT": count_params(accounting.reference_shape(2), AdaptationMode("fft")),
        "FedAA": count_params(accounting.reference_shape(2), AdaptationMode("aa", aa_width=accounting.CLIP_AA_WIDTH)),
        "FedLC K=2": count_params(accounting.reference_shape(2), AdaptationMode("lc")),
        "FedLC K=397": count_params(accounting.reference_shape(397), AdaptationMode("lc")),
    }
    wrong = []
    for label, params, mb in cases:
        got_mb = to_mb(payload_bytes(shapes[label], 4))
        if shapes[label] != params or got_mb != mb:
            wrong.append(f"{label}: expected {params} / {mb} MB, computed {shapes[label]} / {got_mb} MB")
    elapsed = time.perf_counter() - start
    ok = not wrong and elapsed < 1.0
    criterion(2, ok, f"{len(cases) - len(wrong)}/{len(cases)} size rows match in {elapsed:.3f}s"
              + (f"; {'; '.join(wrong)}" if wrong else ""))
    assert ok


def test_03_round_cost(criterion):
    per_round = comm_cost_per_round(10, 1.0, payload_bytes(24_576))
    mb = per_round / accounting.MB
    ledger = CostLedger()
    T = 50
    for t in range(1, T + 1):
        ledger.record(t, 24_576, accounting.cohort_size(10, 1.0), 10)
    ok = mb == 1.875 and ledger.cumulative == T * per_round
    criterion(3, ok, f"per-round {mb} MB; cumulative after {T} rounds {ledger.cumulative} = {T} x {per_round}")
    assert ok


def test_04_gradient_check(criterion):
    start = time.perf_counter()
    worst, worst_seed, over = 0.0, None, 0
    for seed in range(100):
        rng = np.random.default_rng([seed, 4])
        cfg = ModelConfig(
            d_feat=int(rng.integers(2, 17)), dim=int(rng.integers(2, 17)),
            image_blocks=int(rng.integers(1, 3)), text_blocks=int(rng.integers(1, 3)),
            num_classes=int(rng.integers(2, 6)),
        )
        targets = [("text",), ("image",), ("image", "text")][seed % 3]
        mode = AdaptationMode("flora", targets, int(rng.integers(1, 4)), float(rng.uniform(0.5, 4.0)))
        model = build_model(cfg, mode, seed)
        # nonzero B so adapter gradients are not identically zero
        for name in model.lora_names():
            if name.endswith(".B"):
                model.params[name] = rng.normal(0.0, 0.1, model.params[name].shape)
        x, y = rng.normal(size=(4, cfg.d_feat)), rng.integers(0, cfg.num_classes, 4)
        err = finite_diff_check(lambda t, n, x, y: loss_graph(t, n, model, x, y), model.params, 1e-4, (x, y))
        over += err > 1e-5
        if err > worst:
            worst, worst_seed = err, seed
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 30.0
    criterion(4, ok, f"max relative error {worst:.2e} (seed {worst_seed}) over 100 configs at tau=0.01, "
              f"{over} above 1e-5, {elapsed:.1f}s")
    assert ok


def test_05_zero_shot_identity(criterion):
    cfg = ExperimentConfig(seed=0, mode="flora")
    fed, _ = setup(cfg)
    base = build_model(cfg.model_config(), AdaptationMode("fft"), cfg.seed, base_params(cfg))
    x = fed.test.features
    p_base, p_fed = forward_probs(base, x), forward_probs(fed.global_model, x)
    same_pred = np.array_equal(predict(p_base), predict(p_fed))
    ok = same_pred and np.array_equal(p_base, p_fed)
    criterion(5, ok, f"round-0 predictions bitwise equal to base on {len(x)} test rows: {same_pred}")
    assert ok


def test_06_single_client_equivalence(criterion):
    cfg = ExperimentConfig(seed=0, mode="flora", num_clients=1, rounds=5)
    fed, model = setup(cfg)
    central = model.clone()
    for _ in range(cfg.rounds):
        fed.run_round()
    train_centralized(central, fed.clients[0].data, cfg.rounds * cfg.local_epochs, cfg.batch_size, cfg.optimizer().new_state(), cfg.seed)
    differing = [n for n in central.names() if not np.array_equal(central.params[n], fed.global_model.params[n])]
    ok = not differing
    criterion(6, ok, f"N=1 T=5 federated vs 5 centralized epochs: {len(central.names()) - len(differing)}/"
              f"{len(central.names())} parameters bitwise equal")
    assert ok


def test_07_aggregation_oracle(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        shapes = [(int(rng.integers(1, 5)), int(rng.integers(1, 5))) for _ in range(int(rng.integers(1, 4)))]
        payloads = [
            TransferPayload("flora", tuple((f"p{j}", rng.normal(size=s) * 10.0 ** rng.integers(-3, 3)) for j, s in enumerate(shapes)))
            for _ in range(n)
        ]
        sizes = [int(s) for s in rng.integers(1, 5000, n)]
        out = aggregate(payloads, sizes).as_dict()
        total = sum(sizes)
        for j in range(len(shapes)):
            name = f"p{j}"
            arrays = [p.as_dict()[name] for p in payloads]
            for idx in np.ndindex(arrays[0].shape):
                ref = math.fsum(s * a[idx] for s, a in zip(sizes, arrays)) / total
                worst = max(worst, abs(out[name][idx] - ref))
    fixed = True
    for _ in range(50):
        p = TransferPayload("flora", (("w", rng.normal(size=(3, 3))),))
        fixed &= np.array_equal(aggregate([p], [int(rng.integers(1, 100))]).as_dict()["w"], p.as_dict()["w"])
        k = int(rng.integers(2, 6))
        fixed &= np.array_equal(aggregate([p] * k, [7] * k).as_dict()["w"], p.as_dict()["w"])
        fixed &= np.array_equal(aggregate([p] * k, list(rng.integers(1, 99, k))).as_dict()["w"], p.as_dict()["w"])
    ok = worst <= 1e-12 and fixed
    criterion(7, ok, f"max |aggregate - brute force| {worst:.2e} over 1000 sets; fixed points exact: {fixed}")
    assert ok


def test_08_partition_properties(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    failures = []
    for i in range(100):
        K = int(rng.integers(2, 12))
        labels = np.repeat(np.arange(K), int(rng.integers(5, 30)))
        data = Dataset(np.zeros((labels.size, 1)), labels, K)
        scheme = ["iid", "dirichlet", "pathological", "fewshot_iid"][i % 4]
        N = int(rng.integers(1, 6))
        k = max(1, (K - 1) // max(1, N))
        if scheme == "pathological" and k * (N - 1) >= K:
            N = 1
        spec = PartitionSpec(scheme, N, float(rng.uniform(0.1, 5)), k, int(rng.integers(1, 4)), int(rng.integers(0, 10**6)))
        part = make_partition(data, spec)
        seen = np.concatenate(part.client_indices)
        if len(np.unique(seen)) != len(seen) or (scheme in ("iid", "dirichlet") and len(seen) != len(data)):
            failures.append((i, scheme))
    labels = np.repeat(np.arange(10), 1000)
    data = Dataset(np.zeros((labels.size, 1)), labels, 10)

    def mean_entropy(scheme, beta):
        return float(np.mean([
            np.mean([label_entropy(labels[ix], 10) for ix in make_partition(data, PartitionSpec(scheme, 10, beta, seed=s)).client_indices])
            for s in range(20)
        ]))

    e01, e1, eiid = mean_entropy("dirichlet", 0.1), mean_entropy("dirichlet", 1.0), mean_entropy("iid", 1.0)
    rows_ok = all(
        [len(g) for g in pathological_class_assignment(K, N, k, 0)] == [k] * (N - 1) + [last]
        for K, N, k, last in FEWSHOT_CLASS_ROWS.values()
    )
    elapsed = time.perf_counter() - start
    ok = not failures and e01 < e1 < eiid and rows_ok and elapsed < 60
    criterion(8, ok, f"100 specs disjoint/complete: {not failures}; entropy {e01:.3f} < {e1:.3f} < {eiid:.3f}; "
              f"{len(FEWSHOT_CLASS_ROWS)} class-count rows: {rows_ok}; {elapsed:.1f}s")
    assert ok


def test_09_desk_learning(criterion):
    cfg = ExperimentConfig(seed=0, mode="flora", workers=1)
    start = time.perf_counter()
    result = run_experiment(cfg)
    elapsed = time.perf_counter() - start
    gain = result.final_acc - result.zero_shot_acc
    first, last = result.reports[0].mean_train_loss, result.reports[-1].mean_train_loss
    ok = gain >= 0.20 and last < 0.5 * first and elapsed < 120
    criterion(9, ok, f"zero-shot {result.zero_shot_acc:.4f} -> final {result.final_acc:.4f} (+{100 * gain:.1f}pp); "
              f"train loss {first:.3f} -> {last:.3f} ({last / first:.1%}); {elapsed:.1f}s")
    assert ok


def test_10_mode_ordering(criterion):
    shape = ModelShape.from_config(ModelConfig(num_classes=397))
    order = ["flora", "aa", "lc", "vm_lc", "fft"]
    nbytes = [payload_bytes(count_params(shape, AdaptationMode(k))) for k in order]
    ok = all(a < b for a, b in zip(nbytes, nbytes[1:]))
    criterion(10, ok, " < ".join(f"{k}={b}" for k, b in zip(order, nbytes)) + " bytes")
    assert ok


def test_11_determinism(criterion, tmp_path):
    small = ["--per-class", "60", "--pretrain-per-class", "40", "--rounds", "4", "--num-clients", "4", "--lr", "1e-3"]
    cases = [("flora", "0"), ("fft", "1"), ("lc", "2"), ("vm_lc", "3"), ("aa", "4")]
    identical = []
    for mode, seed in cases:
        files = []
        for rep in ("a", "b"):
            out = tmp_path / rep
            assert cli_main(["run", "--seed", seed, "--mode", mode, "--output-dir", str(out), "--quiet",
                             "--partition", "dirichlet", "--sample-rate", "0.5"] + small) == 0
            (run,) = [p for p in out.iterdir() if p.name.startswith(f"{mode}-seed{seed}-")]
            files.append((run / "metrics.csv").read_bytes() + (run / "summary.json").read_bytes())
        identical.append(files[0] == files[1])
    ok = all(identical)
    criterion(11, ok, f"{sum(identical)}/{len(cases)} (mode, seed) re-runs byte-identical")
    assert ok
