"""Synthetic datasets, the 80/20 split, and client partitioning schemes.

Dataset file format (UTF-8 text, comma separated)::

    d_feat,K
    x_0,x_1,...,x_{d_feat-1},label
    ...

Floats are written with ``repr`` so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    InsufficientDataError,
    InsufficientShotsError,
    ParameterError,
    ParseError,
    PartitionInfeasibleError,
    RangeError,
)

MAX_DIRICHLET_ATTEMPTS = 100


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = ""
    # positions of these rows in the dataset this one was cut from
    origin: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ParameterError("dataset needs at least one feature row")
        if self.labels.shape != (self.features.shape[0],):
            raise ParameterError("one label per feature row required")
        if not np.all(np.isfinite(self.features)):
            raise ParameterError("dataset features must be finite")
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= self.num_classes))
        if bad.size:
            raise RangeError(f"row {bad[0]}: label {self.labels[bad[0]]} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def d_feat(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, self.provenance, idx)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class Partition:
    client_indices: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]

    def manifest(self) -> str:
        """JSON audit record: client id (1-based) -> sorted index list."""
        return json.dumps(
            {str(i + 1): [int(v) for v in ix] for i, ix in enumerate(self.client_indices)}, indent=1
        )


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str = "iid"  # iid | dirichlet | pathological | fewshot_iid
    num_clients: int = 10
    beta: float = 1.0
    classes_per_client: int = 2
    shots: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("iid", "dirichlet", "pathological", "fewshot_iid"):
            raise ParameterError(f"unknown partition scheme {self.scheme!r}")
        if self.num_clients < 1:
            raise ParameterError("num_clients must be >= 1")
        if self.scheme == "dirichlet" and not self.beta > 0:
            raise ParameterError(f"Dirichlet beta must be > 0, got {self.beta}")
        if self.scheme in ("pathological", "fewshot_iid") and self.shots < 1:
            raise ParameterError("shots must be >= 1")


class TrainTestSplit(NamedTuple):
    train: Dataset
    test: Dataset
    stratified: bool


# --------------------------------------------------------------------------
# generation and I/O
# --------------------------------------------------------------------------


def synth_dataset(
    num_classes: int,
    d_feat: int,
    per_class: int,
    separation: float,
    seed: int,
    shift: float = 0.0,
    shift_seed: int = 1,
) -> Dataset:
    """Gaussian blobs around random unit-norm class means scaled by ``separation``.

    ``shift`` > 0 perturbs each mean direction by ``shift`` times an independent
    Gaussian direction (drawn from ``shift_seed``) before renormalizing; the
    same ``seed`` with different shifts gives related source/target tasks.
    """
    if per_class < 1:
        raise ParameterError("per_class must be >= 1")
    if separation < 0:
        raise ParameterError("separation must be >= 0")
    rng = np.random.default_rng([seed, 7])
    means = rng.normal(size=(num_classes, d_feat))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    if shift:
        drift = np.random.default_rng([seed, shift_seed, 11]).normal(size=means.shape)
        drift /= np.linalg.norm(drift, axis=1, keepdims=True)
        means = means + shift * drift
        means /= np.linalg.norm(means, axis=1, keepdims=True)
    noise_rng = np.random.default_rng([seed, shift_seed if shift else 0, 13])
    labels = np.repeat(np.arange(num_classes), per_class)
    features = separation * means[labels] + noise_rng.normal(size=(labels.size, d_feat))
    prov = f"synthetic:K={num_classes},d={d_feat},per_class={per_class},sep={separation},seed={seed}"
    if shift:
        prov += f",shift={shift},shift_seed={shift_seed}"
    return Dataset(features, labels, num_classes, prov)


def save_dataset(path, dataset: Dataset) -> None:
    lines = [f"{dataset.d_feat},{dataset.num_classes}"]
    for row, label in zip(dataset.features, dataset.labels):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(label)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError(f"{path}: empty dataset file")
    try:
        d_feat, num_classes = (int(v) for v in lines[0].split(","))
    except ValueError:
        raise ParseError(f"{path}:1: header must be 'd_feat,K'") from None
    if d_feat < 1 or num_classes < 2:
        raise ParseError(f"{path}:1: need d_feat >= 1 and K >= 2")
    feats, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != d_feat + 1:
            raise ParseError(f"{path}:{lineno}: expected {d_feat + 1} fields, got {len(cells)}")
        try:
            row = [float(c) for c in cells[:-1]]
            label = int(cells[-1])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: malformed value") from None
        if not all(math.isfinite(v) for v in row):
            raise ParseError(f"{path}:{lineno}: non-finite feature")
        if not 0 <= label < num_classes:
            raise RangeError(f"{path}:{lineno}: label {label} outside [0, {num_classes})")
        feats.append(row)
        labels.append(label)
    if not feats:
        raise ParseError(f"{path}: no data rows")
    return Dataset(np.array(feats), np.array(labels), num_classes, f"file:{path}")


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, proportional to ``weights``; ties to the lower index."""
    weights = np.asarray(weights, dtype=np.float64)
    exact = weights / weights.sum() * total
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        order = np.lexsort((np.arange(len(exact)), -(exact - counts)))
        counts[order[:short]] += 1
    return counts


def train_test_split(dataset: Dataset, test_fraction: float = 0.2, seed: int = 0, stratify: bool = True) -> TrainTestSplit:
    if not 0 < test_fraction < 1:
        raise ParameterError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng([seed, 31])
    n = len(dataset)
    n_test = int(round(n * test_fraction))
    counts = dataset.class_counts()
    present = counts[counts > 0]
    stratified = stratify and bool(np.all(present >= 2))
    if stratified:
        per_class = largest_remainder(counts, n_test)
        test_idx = []
        for c in range(dataset.num_classes):
            members = np.flatnonzero(dataset.labels == c)
            test_idx.append(rng.permutation(members)[: per_class[c]])
        test_idx = np.concatenate(test_idx)
    else:
        test_idx = rng.permutation(n)[:n_test]
    mask = np.zeros(n, dtype=bool)
    mask[test_idx] = True
    train_idx = np.flatnonzero(~mask)
    test_idx = np.flatnonzero(mask)
    return TrainTestSplit(dataset.subset(train_idx), dataset.subset(test_idx), stratified)


def split_iid(train: Dataset, num_clients: int, seed: int) -> Partition:
    n = len(train)
    if num_clients < 1:
        raise ParameterError("num_clients must be >= 1")
    if n < num_clients:
        raise InsufficientDataError(f"{n} samples cannot cover {num_clients} clients")
    order = np.random.default_rng([seed, 41]).permutation(n)
    return Partition(tuple(np.sort(order[i::num_clients]) for i in range(num_clients)))


def split_dirichlet(train: Dataset, num_clients: int, beta: float, seed: int) -> Partition:
    """Per-class client proportions ~ Dir(beta); redraw the whole split if a client is empty."""
    if not beta > 0:
        raise ParameterError(f"Dirichlet beta must be > 0, got {beta}")
    if num_clients < 1:
        raise ParameterError("num_clients must be >= 1")
    rng = np.random.default_rng([seed, 53])
    by_class = [np.flatnonzero(train.labels == c) for c in range(train.num_classes)]
    for _ in range(MAX_DIRICHLET_ATTEMPTS):
        buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for members in by_class:
            if members.size == 0:
                continue
            members = rng.permutation(members)
            props = rng.gamma(beta, 1.0, size=num_clients)
            if not props.sum() > 0:
                props = np.ones(num_clients)
            counts = largest_remainder(props, members.size)
            start = 0
            for i, k in enumerate(counts):
                buckets[i].append(members[start : start + k])
                start += k
        parts = tuple(np.sort(np.concatenate(b)) if b else np.empty(0, np.int64) for b in buckets)
        if all(p.size for p in parts):
            return Partition(parts)
    raise PartitionInfeasibleError(
        f"no split without empty clients after {MAX_DIRICHLET_ATTEMPTS} draws (beta={beta}, N={num_clients}, n={len(train)})"
    )


def pathological_class_assignment(num_classes: int, num_clients: int, classes_per_client: int, seed: int) -> list[np.ndarray]:
    """Shuffle classes, deal ``classes_per_client`` to each client; the last client takes the remainder."""
    k = classes_per_client
    if k < 1 or k * (num_clients - 1) >= num_classes:
        raise ParameterError(
            f"cannot deal {k} classes to each of {num_clients - 1} clients and leave any for the last (K={num_classes})"
        )
    order = np.random.default_rng([seed, 67]).permutation(num_classes)
    groups = [np.sort(order[i * k : (i + 1) * k]) for i in range(num_clients - 1)]
    groups.append(np.sort(order[(num_clients - 1) * k :]))
    return groups


def split_pathological(train: Dataset, num_clients: int, classes_per_client: int, shots: int, seed: int) -> Partition:
    if shots < 1:
        raise ParameterError("shots must be >= 1")
    groups = pathological_class_assignment(train.num_classes, num_clients, classes_per_client, seed)
    rng = np.random.default_rng([seed, 71])
    parts = []
    for group in groups:
        chosen = []
        for c in group:
            members = np.flatnonzero(train.labels == c)
            if members.size < shots:
                raise InsufficientShotsError(f"class {c} has {members.size} training samples, {shots} shots requested")
            chosen.append(rng.permutation(members)[:shots])
        parts.append(np.sort(np.concatenate(chosen)))
    return Partition(tuple(parts))


def split_fewshot_iid(train: Dataset, num_clients: int, shots: int, seed: int) -> Partition:
    """Every client gets ``shots`` disjoint samples of every class."""
    if shots < 1:
        raise ParameterError("shots must be >= 1")
    rng = np.random.default_rng([seed, 73])
    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in range(train.num_classes):
        members = np.flatnonzero(train.labels == c)
        need = shots * num_clients
        if members.size < need:
            raise InsufficientShotsError(
                f"class {c} has {members.size} training samples, {shots} shots x {num_clients} clients requested"
            )
        members = rng.permutation(members)
        for i in range(num_clients):
            parts[i].append(members[i * shots : (i + 1) * shots])
    return Partition(tuple(np.sort(np.concatenate(p)) for p in parts))


def make_partition(train: Dataset, spec: PartitionSpec) -> Partition:
    if spec.scheme == "iid":
        return split_iid(train, spec.num_clients, spec.seed)
    if spec.scheme == "dirichlet":
        return split_dirichlet(train, spec.num_clients, spec.beta, spec.seed)
    if spec.scheme == "pathological":
        return split_pathological(train, spec.num_clients, spec.classes_per_client, spec.shots, spec.seed)
    return split_fewshot_iid(train, spec.num_clients, spec.shots, spec.seed)


def label_entropy(labels: np.ndarray, num_classes: int) -> float:
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
