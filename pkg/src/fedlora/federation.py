"""Round engine: client sampling, local Adam updates, weighted aggregation.

Client ids are 1-based. A client's shuffling stream is keyed by
(run seed, client id, local epoch index), where the epoch index counts
``(round - 1) * local_epochs + epoch``; centralized training with client id 1
and the same seed therefore visits batches in the same order as a
single-client federated run.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import accounting
from .errors import CohortError, DivergenceError, NumericError, ParameterError, ProtocolError
from .model import DualEncoderModel, evaluate, loss_graph, select_transfer_set
from .numerics import AdamState, Matrix, Tape, adam_step
from .partition import Dataset


@dataclass(frozen=True)
class TransferPayload:
    mode: str
    entries: tuple[tuple[str, Matrix], ...]
    round: int = 0

    def __post_init__(self):
        names = [n for n, _ in self.entries]
        if names != sorted(names) or len(set(names)) != len(names):
            raise ProtocolError("payload entries must have unique names in ascending order")

    @classmethod
    def from_model(cls, model: DualEncoderModel, round_index: int = 0) -> "TransferPayload":
        names = select_transfer_set(model).names
        return cls(model.mode.kind, tuple((n, model.params[n].copy()) for n in names), round_index)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.entries)

    @property
    def param_count(self) -> int:
        return sum(m.size for _, m in self.entries)

    def as_dict(self) -> dict[str, Matrix]:
        return dict(self.entries)


@dataclass
class OptimizerConfig:
    lr: float = 5e-5
    eps: float = 1e-6
    weight_decay: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999

    def new_state(self) -> AdamState:
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


@dataclass
class ClientState:
    client_id: int
    data: Dataset
    model: DualEncoderModel
    optimizer: AdamState
    seed: int
    epochs_done: int = 0


@dataclass
class RoundReport:
    round: int
    mode: str
    test_acc: float
    test_loss: float
    train_losses: dict[int, float]
    bytes_up: int
    bytes_down: int
    cum_bytes: int
    broadcast_bytes: int
    train_ms: float
    eval_ms: float
    sampled: list[int]

    @property
    def mean_train_loss(self) -> float:
        return float(np.mean([self.train_losses[c] for c in sorted(self.train_losses)]))


def sample_clients(num_clients: int, sample_rate: float, round_index: int, seed: int) -> list[int]:
    if not 0 < sample_rate <= 1:
        raise ParameterError(f"sample rate must lie in (0, 1], got {sample_rate}")
    k = accounting.cohort_size(num_clients, sample_rate)
    if k == 0:
        raise CohortError(f"floor({sample_rate} * {num_clients}) = 0 clients sampled")
    if k == num_clients:
        return list(range(1, num_clients + 1))
    rng = np.random.default_rng([seed, round_index, 97])
    return sorted(int(c) + 1 for c in rng.choice(num_clients, size=k, replace=False))


def batch_order(n: int, seed: int, client_id: int, epoch_index: int) -> np.ndarray:
    return np.random.default_rng([seed, client_id, epoch_index, 89]).permutation(n)


def local_step(model: DualEncoderModel, opt: AdamState, x: Matrix, y: np.ndarray, names) -> float:
    """forward -> cross-entropy -> backward -> Adam on ``names``; returns the batch loss."""
    tape = Tape()
    nodes = {n: tape.param(model.params[n], n, trainable=n in names) for n in model.names()}
    tape.loss = loss_graph(tape, nodes, model, x, y)
    loss = float(tape.loss.value[0, 0])
    grads = tape.backward()
    updated = adam_step({n: model.params[n] for n in names}, grads, opt)
    for n in names:
        model.params[n] = updated[n]
    return loss


def train_epochs(
    model: DualEncoderModel,
    opt: AdamState,
    data: Dataset,
    epochs: int,
    batch_size: int,
    seed: int,
    client_id: int = 1,
    first_epoch: int = 0,
) -> list[float]:
    """Seeded-shuffle minibatch training of the model's trainable set; returns batch losses."""
    names = select_transfer_set(model).names
    losses = []
    for e in range(epochs):
        order = batch_order(len(data), seed, client_id, first_epoch + e)
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            try:
                loss = local_step(model, opt, data.features[idx], data.labels[idx], names)
            except NumericError as exc:
                raise DivergenceError(str(exc)) from None
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss}")
            losses.append(loss)
    return losses


def train_centralized(model: DualEncoderModel, data: Dataset, epochs: int, batch_size: int, opt: AdamState, seed: int) -> list[float]:
    return train_epochs(model, opt, data, epochs, batch_size, seed, client_id=1)


def load_payload(model: DualEncoderModel, payload: TransferPayload) -> None:
    if payload.mode != model.mode.kind:
        raise ProtocolError(f"payload mode {payload.mode!r} does not match model mode {model.mode.kind!r}")
    expected = select_transfer_set(model).names
    if payload.names != expected:
        raise ProtocolError(f"payload entries {payload.names} do not match transfer set {expected}")
    for name, value in payload.entries:
        if value.shape != model.params[name].shape:
            raise ProtocolError(f"payload entry {name!r} has shape {value.shape}, model has {model.params[name].shape}")
        model.params[name] = value.copy()


def client_update(
    client: ClientState, payload: TransferPayload, local_epochs: int, batch_size: int, round_index: int
) -> tuple[TransferPayload, float]:
    """Write the global payload in, train locally, return the new payload and mean batch loss."""
    load_payload(client.model, payload)
    try:
        losses = train_epochs(
            client.model, client.optimizer, client.data, local_epochs, batch_size,
            client.seed, client.client_id, client.epochs_done,
        )
    except DivergenceError as exc:
        raise DivergenceError(f"round {round_index}, client {client.client_id}: {exc}") from None
    client.epochs_done += local_epochs
    return TransferPayload.from_model(client.model, round_index), float(np.mean(losses))


def aggregate(payloads: list[TransferPayload], sizes: list[int]) -> TransferPayload:
    """Size-weighted mean of payloads (listed in ascending client id order).

    Equal sizes use the plain mean. The result is clipped into the per-entry
    envelope of the inputs, which removes rounding excursions outside the
    convex hull; a single payload or identical payloads come back unchanged.
    """
    if not payloads:
        raise ProtocolError("nothing to aggregate")
    if len(sizes) != len(payloads):
        raise ProtocolError("one dataset size per payload required")
    if any(s < 0 for s in sizes):
        raise ParameterError("dataset sizes must be non-negative")
    total = sum(sizes)
    if total <= 0:
        raise ParameterError("total dataset size is zero")
    first = payloads[0]
    for p in payloads[1:]:
        if p.mode != first.mode or p.names != first.names:
            raise ProtocolError("payloads disagree on mode or entry names")
        for (name, a), (_, b) in zip(first.entries, p.entries):
            if a.shape != b.shape:
                raise ProtocolError(f"entry {name!r}: shapes {a.shape} and {b.shape} differ")
    equal = len(set(sizes)) == 1
    weights = [s / total for s in sizes]
    entries = []
    for j, name in enumerate(first.names):
        stack = [p.entries[j][1] for p in payloads]
        if equal:
            acc = stack[0].copy()
            for m in stack[1:]:
                acc = acc + m
            acc = acc / len(stack)
        else:
            acc = weights[0] * stack[0]
            for w, m in zip(weights[1:], stack[1:]):
                acc = acc + w * m
        lo = np.minimum.reduce(stack)
        hi = np.maximum.reduce(stack)
        entries.append((name, np.clip(acc, lo, hi)))
    return TransferPayload(first.mode, tuple(entries), max(p.round for p in payloads))


@dataclass
class Federation:
    """Server-side state of one run."""

    global_model: DualEncoderModel
    clients: list[ClientState]
    test: Dataset
    sample_rate: float = 1.0
    local_epochs: int = 1
    batch_size: int = 128
    seed: int = 0
    bytes_per_param: int = accounting.DEFAULT_BYTES_PER_PARAM
    workers: int = 1
    round_index: int = 0
    ledger: accounting.CostLedger = field(default=None)

    def __post_init__(self):
        if self.ledger is None:
            self.ledger = accounting.CostLedger(self.bytes_per_param)
        self.payload = TransferPayload.from_model(self.global_model, 0)

    def evaluate(self) -> tuple[float, float]:
        return evaluate(self.global_model, self.test.features, self.test.labels)

    def run_round(self) -> RoundReport:
        t = self.round_index + 1
        sampled = sample_clients(len(self.clients), self.sample_rate, t, self.seed)
        by_id = {c.client_id: c for c in self.clients}
        for cid in sampled:
            if len(by_id[cid].data) < 1:
                raise ProtocolError(f"round {t}: sampled client {cid} holds no data")
        start = time.perf_counter()

        def work(cid):
            return client_update(by_id[cid], self.payload, self.local_epochs, self.batch_size, t)

        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                results = list(pool.map(work, sampled))
        else:
            results = [work(cid) for cid in sampled]
        train_ms = (time.perf_counter() - start) * 1000.0
        payloads = [r[0] for r in results]
        self.payload = aggregate(payloads, [len(by_id[c].data) for c in sampled])
        load_payload(self.global_model, self.payload)
        start = time.perf_counter()
        acc, loss = self.evaluate()
        eval_ms = (time.perf_counter() - start) * 1000.0
        entry = self.ledger.record(t, self.payload.param_count, len(sampled), len(self.clients))
        self.round_index = t
        return RoundReport(
            round=t,
            mode=self.payload.mode,
            test_acc=acc,
            test_loss=loss,
            train_losses={cid: r[1] for cid, r in zip(sampled, results)},
            bytes_up=entry.cohort * entry.payload_bytes,
            bytes_down=entry.cohort * entry.payload_bytes,
            cum_bytes=entry.cumulative_bytes,
            broadcast_bytes=entry.broadcast_bytes,
            train_ms=train_ms,
            eval_ms=eval_ms,
            sampled=sampled,
        )


def make_clients(
    base: DualEncoderModel, data: Dataset, client_indices, optimizer: OptimizerConfig, seed: int
) -> list[ClientState]:
    return [
        ClientState(i + 1, data.subset(ix), base.clone(), optimizer.new_state(), seed)
        for i, ix in enumerate(client_indices)
    ]


def run_round(fed: Federation) -> tuple[TransferPayload, RoundReport]:
    report = fed.run_round()
    return fed.payload, report
