import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedlora.errors import (
    InsufficientDataError,
    InsufficientShotsError,
    ParameterError,
    ParseError,
    PartitionInfeasibleError,
    RangeError,
)
from fedlora.federation import train_centralized
from fedlora.model import AdaptationMode, ModelConfig, build_model, evaluate
from fedlora.numerics import AdamState
from fedlora.partition import (
    Dataset,
    PartitionSpec,
    label_entropy,
    largest_remainder,
    load_dataset,
    make_partition,
    pathological_class_assignment,
    save_dataset,
    split_dirichlet,
    split_fewshot_iid,
    split_iid,
    split_pathological,
    synth_dataset,
    train_test_split,
)

# dataset -> (K, N, classes for clients 1..N-1, classes for client N)
FEWSHOT_CLASS_ROWS = {
    "F-MNIST": (10, 5, 2, 2), "CIFAR-10": (10, 5, 2, 2), "CIFAR-100": (100, 10, 10, 10),
    "TINY": (200, 10, 20, 20), "OxfordPets": (37, 6, 6, 7), "Flowers102": (102, 6, 17, 17),
    "Aircraft": (100, 10, 10, 10), "Cars": (196, 7, 28, 28), "DTD": (47, 7, 6, 11),
    "EuroSAT": (10, 5, 2, 2), "FER2013": (7, 3, 2, 3), "Caltech101": (101, 10, 10, 11),
    "Food101": (101, 10, 10, 11), "Country211": (211, 10, 21, 22), "SUN397": (397, 10, 39, 46),
    "SST2": (2, 2, 1, 1),
}


def labels_dataset(per_class, num_classes=10):
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(np.zeros((labels.size, 1)), labels, num_classes)


def tv_distance(p, q):
    return 0.5 * np.abs(p - q).sum()


def check_disjoint(partition, n, complete):
    seen = np.concatenate(partition.client_indices)
    assert len(np.unique(seen)) == len(seen)
    assert np.all((seen >= 0) & (seen < n))
    if complete:
        assert len(seen) == n
    for ix in partition.client_indices:
        assert np.array_equal(ix, np.sort(ix))


class TestSynth:
    def test_deterministic(self):
        a = synth_dataset(4, 3, 10, 5.0, seed=1)
        b = synth_dataset(4, 3, 10, 5.0, seed=1)
        assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)

    def test_zero_separation_is_chance(self):
        data = synth_dataset(10, 8, 100, 0.0, seed=2)
        split = train_test_split(data, 0.2, 2)
        cfg = ModelConfig(d_feat=8, dim=8, image_blocks=1, text_blocks=1, num_classes=10, tau=0.01)
        model = build_model(cfg, AdaptationMode("fft"), 2)
        train_centralized(model, split.train, 3, 64, AdamState(lr=1e-2), 2)
        acc, _ = evaluate(model, split.test.features, split.test.labels)
        assert abs(acc - 0.1) <= 0.05

    def test_separable_task_is_learnable(self):
        data = synth_dataset(10, 32, 200, 5.0, seed=0)
        split = train_test_split(data, 0.2, 0)
        cfg = ModelConfig(d_feat=32, dim=32, image_blocks=2, text_blocks=2, num_classes=10, tau=0.01)
        model = build_model(cfg, AdaptationMode("fft"), 0)
        train_centralized(model, split.train, 5, 64, AdamState(lr=1e-2), 0)
        acc, _ = evaluate(model, split.test.features, split.test.labels)
        assert acc >= 0.95

    def test_shift_keeps_shapes(self):
        data = synth_dataset(3, 4, 5, 5.0, seed=0, shift=1.0)
        assert data.features.shape == (15, 4) and "shift=1.0" in data.provenance

    def test_rejects_bad_args(self):
        with pytest.raises(ParameterError):
            synth_dataset(3, 4, 0, 5.0, 0)
        with pytest.raises(ParameterError):
            synth_dataset(3, 4, 5, -1.0, 0)


class TestFiles:
    def test_round_trip_bitwise(self, tmp_path):
        data = synth_dataset(3, 4, 7, 5.0, seed=9)
        save_dataset(tmp_path / "d.csv", data)
        back = load_dataset(tmp_path / "d.csv")
        assert np.array_equal(back.features, data.features) and np.array_equal(back.labels, data.labels)
        assert back.num_classes == 3

    def test_same_seed_same_bytes(self, tmp_path):
        save_dataset(tmp_path / "a.csv", synth_dataset(3, 2, 4, 5.0, 1))
        save_dataset(tmp_path / "b.csv", synth_dataset(3, 2, 4, 5.0, 1))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.csv").write_text("")
        with pytest.raises(ParseError):
            load_dataset(tmp_path / "e.csv")

    def test_label_k_names_row(self, tmp_path):
        (tmp_path / "l.csv").write_text("2,3\n0.1,0.2,1\n0.3,0.4,3\n")
        with pytest.raises(RangeError, match=":3:"):
            load_dataset(tmp_path / "l.csv")

    def test_malformed_row_names_line(self, tmp_path):
        (tmp_path / "m.csv").write_text("2,3\n0.1,0.2,1\n0.3,1\n")
        with pytest.raises(ParseError, match=":3:"):
            load_dataset(tmp_path / "m.csv")

    def test_range_error_is_parse_error(self):
        assert issubclass(RangeError, ParseError)


class TestSplit:
    def test_sizes(self):
        split = train_test_split(labels_dataset(10), 0.2, 0)
        assert len(split.test) == 20 and len(split.train) == 80 and split.stratified
        assert not set(split.train.origin) & set(split.test.origin)

    def test_deterministic(self):
        a = train_test_split(labels_dataset(10), 0.2, 4)
        b = train_test_split(labels_dataset(10), 0.2, 4)
        assert np.array_equal(a.test.origin, b.test.origin)

    @given(st.lists(st.integers(2, 60), min_size=2, max_size=8), st.integers(0, 99))
    def test_stratified_counts(self, sizes, seed):
        labels = np.concatenate([np.full(s, c) for c, s in enumerate(sizes)])
        data = Dataset(np.zeros((labels.size, 1)), labels, len(sizes))
        split = train_test_split(data, 0.2, seed)
        counts = split.test.class_counts()
        for c, s in enumerate(sizes):
            assert abs(counts[c] - 0.2 * s) <= 1

    def test_unstratified_fallback(self):
        data = Dataset(np.zeros((11, 1)), np.array([0] * 10 + [1]), 2)
        split = train_test_split(data, 0.2, 0)
        assert not split.stratified and len(split.test) == 2

    def test_largest_remainder_sums(self):
        assert list(largest_remainder(np.array([1.0, 1.0, 1.0]), 10)) == [4, 3, 3]


class TestIID:
    def test_single_client(self):
        p = split_iid(labels_dataset(5), 1, 0)
        assert np.array_equal(p.client_indices[0], np.arange(50))

    def test_even_split(self):
        assert split_iid(labels_dataset(10), 10, 0).sizes() == [10] * 10

    def test_too_few(self):
        with pytest.raises(InsufficientDataError):
            split_iid(labels_dataset(1, 3), 4, 0)

    @given(st.integers(1, 300), st.integers(1, 20), st.integers(0, 999))
    def test_sizes_differ_by_one(self, n, clients, seed):
        if n < clients:
            return
        data = Dataset(np.zeros((n, 1)), np.zeros(n, dtype=int), 2)
        p = split_iid(data, clients, seed)
        assert max(p.sizes()) - min(p.sizes()) <= 1
        check_disjoint(p, n, complete=True)

    def test_histograms_approach_global(self):
        data = labels_dataset(1000)
        global_hist = np.full(10, 0.1)
        worst = 0.0
        for seed in range(20):
            p = split_iid(data, 10, seed)
            for ix in p.client_indices:
                hist = np.bincount(data.labels[ix], minlength=10) / len(ix)
                worst = max(worst, tv_distance(hist, global_hist))
        assert worst < 0.1


class TestDirichlet:
    def test_every_sample_once(self):
        data = labels_dataset(100)
        check_disjoint(split_dirichlet(data, 10, 0.5, 0), len(data), complete=True)

    def test_large_beta_approaches_iid(self):
        data = labels_dataset(1000)
        worst = 0.0
        for seed in range(20):
            for ix in split_dirichlet(data, 10, 1e6, seed).client_indices:
                hist = np.bincount(data.labels[ix], minlength=10) / len(ix)
                worst = max(worst, tv_distance(hist, np.full(10, 0.1)))
        assert worst < 0.05

    def test_entropy_ordering(self):
        data = labels_dataset(1000)

        def mean_entropy(split):
            return np.mean([
                np.mean([label_entropy(data.labels[ix], 10) for ix in split(seed).client_indices])
                for seed in range(20)
            ])

        low = mean_entropy(lambda s: split_dirichlet(data, 10, 0.1, s))
        mid = mean_entropy(lambda s: split_dirichlet(data, 10, 1.0, s))
        high = mean_entropy(lambda s: split_dirichlet(data, 10, 1e6, s))
        assert low < mid < high

    def test_infeasible(self):
        with pytest.raises(PartitionInfeasibleError, match="beta=0.01"):
            split_dirichlet(labels_dataset(1, 2), 5, 0.01, 0)

    def test_bad_beta(self):
        with pytest.raises(ParameterError):
            split_dirichlet(labels_dataset(5), 2, 0.0, 0)


class TestPathological:
    def test_five_clients_two_classes(self):
        data = labels_dataset(10)
        p = split_pathological(data, 5, 2, 4, 0)
        assert p.sizes() == [8] * 5

    @pytest.mark.parametrize("name", sorted(FEWSHOT_CLASS_ROWS))
    def test_class_count_rows(self, name):
        K, N, k, last = FEWSHOT_CLASS_ROWS[name]
        groups = pathological_class_assignment(K, N, k, seed=0)
        assert [len(g) for g in groups] == [k] * (N - 1) + [last]
        assert sorted(np.concatenate(groups)) == list(range(K))

    @given(st.integers(2, 40), st.integers(1, 8), st.integers(1, 5), st.integers(1, 4), st.integers(0, 99))
    def test_disjoint_classes_and_exact_counts(self, K, N, k, shots, seed):
        if k * (N - 1) >= K:
            return
        data = labels_dataset(shots + 1, K)
        p = split_pathological(data, N, k, shots, seed)
        check_disjoint(p, len(data), complete=False)
        owned = [set(data.labels[ix]) for ix in p.client_indices]
        assert set().union(*owned) == set(range(K))
        for ix, classes in zip(p.client_indices, owned):
            assert len(ix) == len(classes) * shots

    def test_insufficient_shots_names_class(self):
        with pytest.raises(InsufficientShotsError, match="class"):
            split_pathological(labels_dataset(3), 5, 2, 4, 0)

    def test_infeasible_assignment(self):
        with pytest.raises(ParameterError):
            pathological_class_assignment(10, 6, 2, 0)


class TestFewShotIID:
    def test_counts(self):
        p = split_fewshot_iid(labels_dataset(50), 5, 4, 0)
        assert p.sizes() == [40] * 5

    def test_insufficient(self):
        with pytest.raises(InsufficientShotsError):
            split_fewshot_iid(labels_dataset(10), 5, 4, 0)


@given(
    st.sampled_from(["iid", "dirichlet", "pathological", "fewshot_iid"]),
    st.integers(1, 8),
    st.integers(0, 10_000),
)
def test_any_spec_is_disjoint_and_deterministic(scheme, clients, seed):
    data = labels_dataset(40, 10)
    spec = PartitionSpec(scheme, clients, beta=0.5, classes_per_client=1, shots=3, seed=seed)
    p1, p2 = make_partition(data, spec), make_partition(data, spec)
    check_disjoint(p1, len(data), complete=scheme in ("iid", "dirichlet"))
    assert all(np.array_equal(a, b) for a, b in zip(p1.client_indices, p2.client_indices))


def test_manifest_is_one_based():
    p = split_iid(labels_dataset(1, 4), 2, 0)
    assert sorted(__import__("json").loads(p.manifest())) == ["1", "2"]
