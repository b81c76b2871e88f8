"""Experiment configuration and the end-to-end run pipeline."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from . import checkpoint
from .errors import ConfigError, FedLoraError, RangeError
from .federation import Federation, OptimizerConfig, RoundReport, make_clients, train_epochs
from .model import AdaptationMode, DualEncoderModel, ModelConfig, build_model, evaluate
from .partition import (
    Dataset,
    PartitionSpec,
    load_dataset,
    make_partition,
    synth_dataset,
    train_test_split,
)

REQUIRED = ("seed", "mode")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    mode: str
    # data
    data_path: str | None = None
    num_classes: int = 10
    d_feat: int = 32
    per_class: int = 5000
    separation: float = 5.0
    target_shift: float = 2.0
    test_fraction: float = 0.2
    # model
    dim: int = 32
    image_blocks: int = 2
    text_blocks: int = 2
    tau: float = 0.01
    lora_targets: str = "text"
    rank: int = 2
    alpha: float = 32.0
    alpha_over_rank: bool = False
    aa_width: int = 32
    # base model
    base_checkpoint: str | None = None
    pretrain_epochs: int = 5
    pretrain_lr: float = 1e-2
    pretrain_per_class: int = 200
    # partition
    partition: str = "iid"
    beta: float = 1.0
    classes_per_client: int = 2
    shots: int = 16
    num_clients: int = 10
    sample_rate: float = 1.0
    # training
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 128
    lr: float = 5e-5
    eps: float = 1e-6
    weight_decay: float = 0.2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    # bookkeeping
    bytes_per_param: int = 4
    workers: int = 1
    wall_time: bool = False
    output_dir: str = "runs"

    def __post_init__(self):
        _validate(self)

    def resolved(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """sha256 over every resolved field except where outputs are written."""
        body = {k: v for k, v in self.resolved().items() if k != "output_dir"}
        blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def model_config(self, num_classes: int | None = None, d_feat: int | None = None) -> ModelConfig:
        return ModelConfig(
            d_feat=d_feat or self.d_feat,
            dim=self.dim,
            image_blocks=self.image_blocks,
            text_blocks=self.text_blocks,
            num_classes=num_classes or self.num_classes,
            tau=self.tau,
        )

    def adaptation_mode(self) -> AdaptationMode:
        targets = tuple(sorted(t.strip() for t in self.lora_targets.split(",") if t.strip()))
        return AdaptationMode(self.mode, targets, self.rank, self.alpha, self.alpha_over_rank, self.aa_width)

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.lr, self.eps, self.weight_decay, self.adam_beta1, self.adam_beta2)

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(self.partition, self.num_clients, self.beta, self.classes_per_client, self.shots, self.seed)


def _validate(cfg: ExperimentConfig) -> None:
    def need(cond, key, msg):
        if not cond:
            raise RangeError(f"{key}: {msg} (got {getattr(cfg, key)!r})")

    need(cfg.mode in ("flora", "fft", "lc", "vm_lc", "aa"), "mode", "must be one of flora, fft, lc, vm_lc, aa")
    need(cfg.partition in ("iid", "dirichlet", "pathological", "fewshot_iid"), "partition",
         "must be one of iid, dirichlet, pathological, fewshot_iid")
    for key in ("num_classes",):
        need(getattr(cfg, key) >= 2, key, "must be >= 2")
    for key in ("d_feat", "per_class", "dim", "image_blocks", "text_blocks", "rank", "aa_width", "pretrain_per_class",
                "classes_per_client", "shots", "num_clients", "local_epochs", "batch_size", "bytes_per_param", "workers"):
        need(getattr(cfg, key) >= 1, key, "must be >= 1")
    for key in ("rounds", "pretrain_epochs"):
        need(getattr(cfg, key) >= 0, key, "must be >= 0")
    need(cfg.separation >= 0, "separation", "must be >= 0")
    need(cfg.target_shift >= 0, "target_shift", "must be >= 0")
    need(0 < cfg.test_fraction < 1, "test_fraction", "must lie in (0, 1)")
    need(cfg.tau > 0, "tau", "must be > 0")
    need(cfg.beta > 0, "beta", "must be > 0")
    need(0 < cfg.sample_rate <= 1, "sample_rate", "must lie in (0, 1]")
    need(cfg.lr >= 0, "lr", "must be >= 0")
    need(cfg.pretrain_lr > 0, "pretrain_lr", "must be > 0")
    need(cfg.eps > 0, "eps", "must be > 0")
    need(cfg.weight_decay >= 0, "weight_decay", "must be >= 0")
    need(0 <= cfg.adam_beta1 < 1, "adam_beta1", "must lie in [0, 1)")
    need(0 <= cfg.adam_beta2 < 1, "adam_beta2", "must lie in [0, 1)")
    targets = {t.strip() for t in cfg.lora_targets.split(",") if t.strip()}
    need(targets and targets <= {"text", "image"}, "lora_targets", "must name text and/or image")


CONFIG_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def field_type(name: str) -> type:
    hints = typing.get_type_hints(ExperimentConfig)
    t = hints[name]
    args = [a for a in typing.get_args(t) if a is not type(None)]
    return args[0] if args else t


def coerce(name: str, value):
    if name not in CONFIG_FIELDS:
        raise ConfigError(f"{name}: unknown configuration key")
    if value is None:
        return None
    t = field_type(name)
    try:
        if t is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if t is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if t is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise RangeError(f"{name}: cannot interpret {value!r} as {t.__name__}") from None


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Load a flat YAML mapping, apply overrides (flags win), validate."""
    values: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a key-value mapping")
        values.update(loaded)
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    unknown = sorted(set(values) - set(CONFIG_FIELDS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown configuration key")
    missing = [k for k in REQUIRED if values.get(k) is None]
    if missing:
        raise ConfigError(f"missing required fields: {', '.join(missing)}")
    resolved = {k: coerce(k, v) for k, v in values.items()}
    return ExperimentConfig(**resolved)


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list[RoundReport]
    zero_shot_acc: float
    zero_shot_loss: float
    federation: Federation = field(repr=False)

    @property
    def final_acc(self) -> float:
        return self.reports[-1].test_acc if self.reports else self.zero_shot_acc

    @property
    def total_bytes(self) -> int:
        return self.reports[-1].cum_bytes if self.reports else 0


def target_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data_path:
        return load_dataset(cfg.data_path)
    return synth_dataset(cfg.num_classes, cfg.d_feat, cfg.per_class, cfg.separation, cfg.seed, shift=cfg.target_shift)


def source_dataset(cfg: ExperimentConfig) -> Dataset:
    return synth_dataset(cfg.num_classes, cfg.d_feat, cfg.pretrain_per_class, cfg.separation, cfg.seed)


def pretrain_base(cfg: ExperimentConfig, source: Dataset | None = None) -> DualEncoderModel:
    """Centrally train every encoder weight on the unshifted source task."""
    source = source if source is not None else source_dataset(cfg)
    model = build_model(cfg.model_config(source.num_classes, source.d_feat), AdaptationMode("fft"), cfg.seed)
    if cfg.pretrain_epochs:
        opt = OptimizerConfig(cfg.pretrain_lr, cfg.eps, 0.0, cfg.adam_beta1, cfg.adam_beta2).new_state()
        # client id 0 is reserved for the pretraining stream
        train_epochs(model, opt, source, cfg.pretrain_epochs, cfg.batch_size, cfg.seed, client_id=0)
    return model


def base_params(cfg: ExperimentConfig):
    if cfg.base_checkpoint:
        return checkpoint.load_model(cfg.base_checkpoint).params
    if cfg.pretrain_epochs:
        return pretrain_base(cfg).params
    return None


def setup(cfg: ExperimentConfig) -> tuple[Federation, DualEncoderModel]:
    data = target_dataset(cfg)
    split = train_test_split(data, cfg.test_fraction, cfg.seed)
    mcfg = cfg.model_config(data.num_classes, data.d_feat)
    model = build_model(mcfg, cfg.adaptation_mode(), cfg.seed, base_params(cfg))
    partition = make_partition(split.train, cfg.partition_spec())
    clients = make_clients(model, split.train, partition.client_indices, cfg.optimizer(), cfg.seed)
    fed = Federation(
        global_model=model.clone(),
        clients=clients,
        test=split.test,
        sample_rate=cfg.sample_rate,
        local_epochs=cfg.local_epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        bytes_per_param=cfg.bytes_per_param,
        workers=cfg.workers,
    )
    return fed, model


def run_experiment(cfg: ExperimentConfig, progress=None) -> ExperimentResult:
    try:
        fed, _ = setup(cfg)
        zs_acc, zs_loss = fed.evaluate()
        reports = []
        for _ in range(cfg.rounds):
            report = fed.run_round()
            reports.append(report)
            if progress:
                progress(report)
    except FedLoraError as exc:
        raise type(exc)(f"[config {cfg.config_hash()}] {exc}") from None
    return ExperimentResult(cfg, reports, zs_acc, zs_loss, fed)


def zero_shot_accuracy(model: DualEncoderModel, data: Dataset) -> float:
    return evaluate(model, data.features, data.labels)[0]
