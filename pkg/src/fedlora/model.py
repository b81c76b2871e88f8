"""Dual-encoder classifier with LoRA adapters and the five adaptation modes.

Parameters live in a flat ``name -> Matrix`` dict:

    image.input_proj            d_feat x d
    image.block{i}              d x d
    text.block{i}               d x d
    text.class_embeddings       K x d
    head                        (d+1) x K        (lc, vm_lc)
    aa.w1 / aa.b1 / aa.w2 / aa.b2                (aa)
    lora.<base name>.A / .B     d x r / r x d    (flora)

Every forward pass is built on a :class:`~fedlora.numerics.Tape`, so training
and evaluation share one code path.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import LabelError, ModeError, ParameterError, ShapeError
from .numerics import Matrix, Node, Tape, as_matrix, matmul

MODES = ("flora", "fft", "lc", "vm_lc", "aa")
LORA_TARGETS = ("text", "image")
LORA_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    d_feat: int = 32
    dim: int = 32
    image_blocks: int = 2
    text_blocks: int = 2
    num_classes: int = 10
    tau: float = 0.01

    def __post_init__(self):
        for name in ("d_feat", "dim", "image_blocks", "text_blocks"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        if not self.tau > 0:
            raise ParameterError(f"temperature must be positive, got {self.tau}")


@dataclass(frozen=True)
class AdaptationMode:
    kind: str = "flora"
    lora_targets: tuple[str, ...] = ("text",)
    rank: int = 2
    alpha: float = 32.0
    alpha_over_rank: bool = False
    aa_width: int = 32

    def __post_init__(self):
        if self.kind not in MODES:
            raise ModeError(f"unknown adaptation mode {self.kind!r}; expected one of {MODES}")
        bad = set(self.lora_targets) - set(LORA_TARGETS)
        if bad or not self.lora_targets:
            raise ModeError(f"lora targets must be a non-empty subset of {LORA_TARGETS}")
        if self.rank < 1:
            raise ParameterError("LoRA rank must be >= 1")
        if self.aa_width < 1:
            raise ParameterError("attention adapter width must be >= 1")

    @property
    def lora_scale(self) -> float:
        return self.alpha / self.rank if self.alpha_over_rank else self.alpha


@dataclass
class LoraAdapter:
    A: Matrix
    B: Matrix
    alpha: float
    target: str = ""

    @property
    def rank(self) -> int:
        return self.A.shape[1]


def lora_effective_weight(base: Matrix, adapter: LoraAdapter) -> Matrix:
    """W + alpha * A @ B. ``base`` is not modified."""
    A, B = adapter.A, adapter.B
    if A.shape[1] != B.shape[0] or (A.shape[0], B.shape[1]) != base.shape:
        raise ShapeError(f"adapter A{A.shape} B{B.shape} does not fit base weight {base.shape}")
    return base + adapter.alpha * matmul(A, B)


@dataclass
class DualEncoderModel:
    config: ModelConfig
    mode: AdaptationMode
    params: dict[str, Matrix] = field(default_factory=dict)

    def clone(self) -> "DualEncoderModel":
        return DualEncoderModel(self.config, self.mode, {k: v.copy() for k, v in self.params.items()})

    def names(self) -> list[str]:
        return sorted(self.params)

    def lora_names(self) -> list[str]:
        return [n for n in self.names() if n.startswith("lora.")]

    def adapted_weights(self) -> list[str]:
        return sorted({n[len("lora.") : -len(".A")] for n in self.lora_names() if n.endswith(".A")})

    def with_mode(self, mode: AdaptationMode) -> "DualEncoderModel":
        out = self.clone()
        out.mode = mode
        return out


def image_block_names(config: ModelConfig) -> list[str]:
    return [f"image.block{i}" for i in range(config.image_blocks)]


def text_block_names(config: ModelConfig) -> list[str]:
    return [f"text.block{i}" for i in range(config.text_blocks)]


def init_base_params(config: ModelConfig, seed: int) -> dict[str, Matrix]:
    rng = np.random.default_rng([seed, 101])
    d = config.dim
    params = {"image.input_proj": rng.normal(0.0, 1.0 / np.sqrt(config.d_feat), (config.d_feat, d))}
    for name in image_block_names(config):
        params[name] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
    for name in text_block_names(config):
        params[name] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
    params["text.class_embeddings"] = rng.normal(0.0, 1.0, (config.num_classes, d))
    return params


def attach_lora(model: DualEncoderModel, seed: int) -> None:
    """Add one (A, B) pair per block projection of each targeted encoder; B starts at zero."""
    rng = np.random.default_rng([seed, 202])
    r = model.mode.rank
    targets = []
    if "image" in model.mode.lora_targets:
        targets += image_block_names(model.config)
    if "text" in model.mode.lora_targets:
        targets += text_block_names(model.config)
    for base in sorted(targets):
        d_in, d_out = model.params[base].shape
        model.params[f"lora.{base}.A"] = rng.normal(0.0, LORA_INIT_STD, (d_in, r))
        model.params[f"lora.{base}.B"] = np.zeros((r, d_out))


def build_attention_adapter(width: int, dim: int) -> dict[str, Matrix]:
    """Softmax-gated residual bottleneck: f + softmax(f W1 + b1) W2 + b2.

    W1 starts as an identity slice so the gate sees the features; W2 and b2
    start at zero, which makes the adapter the identity until trained.
    """
    if width < 1:
        raise ParameterError("attention adapter width must be >= 1")
    w1 = np.zeros((dim, width))
    for i in range(min(dim, width)):
        w1[i, i] = 1.0
    return {
        "aa.w1": w1,
        "aa.b1": np.zeros((1, width)),
        "aa.w2": np.zeros((width, dim)),
        "aa.b2": np.zeros((1, dim)),
    }


def init_linear_head_zero_shot(model: DualEncoderModel) -> Matrix:
    """Head whose columns are the base model's class features, with a zero bias row."""
    if model.mode.kind not in ("lc", "vm_lc"):
        raise ModeError(f"linear head is only used in lc/vm_lc modes, not {model.mode.kind!r}")
    base = DualEncoderModel(model.config, AdaptationMode("fft"), {
        k: v for k, v in model.params.items() if k.startswith(("image.", "text."))
    })
    classes = encode_classes(base)
    head = np.vstack([classes.T, np.zeros((1, model.config.num_classes))])
    return np.ascontiguousarray(head)


def build_model(
    config: ModelConfig,
    mode: AdaptationMode,
    seed: int,
    base_params: dict[str, Matrix] | None = None,
) -> DualEncoderModel:
    """Fresh model for ``mode``; ``base_params`` (e.g. a pretrained checkpoint) replaces random init."""
    params = init_base_params(config, seed) if base_params is None else {
        k: np.array(v, dtype=np.float64) for k, v in base_params.items() if k.startswith(("image.", "text."))
    }
    model = DualEncoderModel(config, mode, params)
    _check_base_shapes(model)
    if mode.kind == "flora":
        attach_lora(model, seed)
    elif mode.kind in ("lc", "vm_lc"):
        model.params["head"] = init_linear_head_zero_shot(model)
    elif mode.kind == "aa":
        model.params.update(build_attention_adapter(mode.aa_width, config.dim))
    return model


def _check_base_shapes(model: DualEncoderModel) -> None:
    cfg = model.config
    expected = {"image.input_proj": (cfg.d_feat, cfg.dim), "text.class_embeddings": (cfg.num_classes, cfg.dim)}
    for name in image_block_names(cfg) + text_block_names(cfg):
        expected[name] = (cfg.dim, cfg.dim)
    for name, shape in expected.items():
        if name not in model.params:
            raise ShapeError(f"base parameter {name!r} missing")
        if model.params[name].shape != shape:
            raise ShapeError(f"base parameter {name!r} has shape {model.params[name].shape}, expected {shape}")


# --------------------------------------------------------------------------
# transfer sets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TransferSet:
    mode: str
    names: tuple[str, ...]
    param_count: int


def select_transfer_set(model: DualEncoderModel, mode: AdaptationMode | None = None) -> TransferSet:
    """Names that ``mode`` trains and exchanges; the two sets are the same by construction."""
    mode = mode or model.mode
    names = model.names()
    if mode.kind == "fft":
        chosen = names
    elif mode.kind == "flora":
        chosen = [n for n in names if n.startswith("lora.")]
        if not chosen:
            raise ModeError("flora mode requested but the model carries no LoRA adapters")
    elif mode.kind == "lc":
        chosen = [n for n in names if n == "head"]
        if not chosen:
            raise ModeError("lc mode requested but the model has no linear head")
    elif mode.kind == "vm_lc":
        if "head" not in model.params:
            raise ModeError("vm_lc mode requested but the model has no linear head")
        chosen = [n for n in names if n.startswith("image.") or n == "head"]
    else:
        chosen = [n for n in names if n.startswith("aa.")]
        if not chosen:
            raise ModeError("aa mode requested but the model has no attention adapter")
    count = sum(model.params[n].size for n in chosen)
    return TransferSet(mode.kind, tuple(chosen), count)


def trainable_names(model: DualEncoderModel) -> tuple[str, ...]:
    return select_transfer_set(model).names


# --------------------------------------------------------------------------
# forward graph
# --------------------------------------------------------------------------


def _weight(tape: Tape, nodes: dict[str, Node], model: DualEncoderModel, name: str) -> Node:
    w = nodes[name]
    a_name = f"lora.{name}.A"
    if a_name in nodes:
        delta = tape.matmul(nodes[a_name], nodes[f"lora.{name}.B"])
        w = tape.add(w, tape.scale(delta, model.mode.lora_scale))
    return w


def image_graph(tape: Tape, nodes: dict[str, Node], model: DualEncoderModel, x: Node) -> Node:
    h = tape.matmul(x, nodes["image.input_proj"])
    for name in image_block_names(model.config):
        h = tape.tanh(tape.matmul(h, _weight(tape, nodes, model, name)))
    return tape.normalize(h)


def text_graph(tape: Tape, nodes: dict[str, Node], model: DualEncoderModel) -> Node:
    h = nodes["text.class_embeddings"]
    for name in text_block_names(model.config):
        h = tape.tanh(tape.matmul(h, _weight(tape, nodes, model, name)))
    return tape.normalize(h)


def _attention_adapter_graph(tape: Tape, nodes: dict[str, Node], feats: Node) -> Node:
    gate = tape.softmax(tape.add(tape.matmul(feats, nodes["aa.w1"]), nodes["aa.b1"]))
    residual = tape.add(tape.matmul(gate, nodes["aa.w2"]), nodes["aa.b2"])
    return tape.normalize(tape.add(feats, residual))


def probs_graph(tape: Tape, nodes: dict[str, Node], model: DualEncoderModel, x: Node) -> Node:
    tau = model.config.tau
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    feats = image_graph(tape, nodes, model, x)
    if model.mode.kind in ("lc", "vm_lc"):
        logits = tape.matmul(tape.append_ones(feats), nodes["head"])
    else:
        classes = text_graph(tape, nodes, model)
        if model.mode.kind == "aa":
            feats = _attention_adapter_graph(tape, nodes, feats)
        logits = tape.matmul(feats, tape.transpose(classes))
    return tape.softmax(tape.scale(logits, 1.0 / tau))


def cross_entropy_graph(tape: Tape, probs: Node, labels) -> Node:
    labels = _check_labels(labels, probs.shape[1], probs.shape[0])
    return tape.scale(tape.mean(tape.log(tape.gather(probs, labels))), -1.0)


def loss_graph(tape: Tape, nodes: dict[str, Node], model: DualEncoderModel, x, labels) -> Node:
    probs = probs_graph(tape, nodes, model, tape.constant(x))
    return cross_entropy_graph(tape, probs, labels)


def _check_labels(labels, num_classes: int, batch: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {batch}")
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise LabelError(f"label {labels[bad[0]]} at row {bad[0]} outside [0, {num_classes})")
    return labels


def _frozen_tape(model: DualEncoderModel) -> tuple[Tape, dict[str, Node]]:
    tape = Tape()
    nodes = {n: tape.param(model.params[n], n, trainable=False) for n in model.names()}
    return tape, nodes


def encode_image(model: DualEncoderModel, x) -> Matrix:
    tape, nodes = _frozen_tape(model)
    return image_graph(tape, nodes, model, tape.constant(x)).value


def encode_classes(model: DualEncoderModel) -> Matrix:
    tape, nodes = _frozen_tape(model)
    return text_graph(tape, nodes, model).value


def forward_probs(model: DualEncoderModel, x) -> Matrix:
    tape, nodes = _frozen_tape(model)
    return probs_graph(tape, nodes, model, tape.constant(x)).value


def cross_entropy(probs: Matrix, labels) -> float:
    probs = as_matrix(probs)
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ParameterError("probability rows must sum to 1")
    tape = Tape()
    return float(cross_entropy_graph(tape, tape.constant(probs), labels).value[0, 0])


def predict(probs: Matrix) -> np.ndarray:
    """Row argmax; ties go to the lowest class index."""
    return np.argmax(probs, axis=1)


def evaluate(model: DualEncoderModel, x, labels) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) on a labelled set."""
    probs = forward_probs(model, x)
    labels = _check_labels(labels, model.config.num_classes, probs.shape[0])
    acc = float(np.mean(predict(probs) == labels))
    return acc, cross_entropy(probs, labels)


# --------------------------------------------------------------------------
# shape-only parameter counting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelShape:
    """Shape description for counting; tower totals may be given when not derivable.

    ``embed_dim`` is the joint space the linear head and attention adapter act on.
    """

    d_feat: int
    d_image: int
    d_text: int
    image_blocks: int
    text_blocks: int
    num_classes: int
    embed_dim: int | None = None
    image_tower_params: int | None = None
    total_params: int | None = None

    @classmethod
    def from_config(cls, config: ModelConfig, **overrides) -> "ModelShape":
        shape = cls(config.d_feat, config.dim, config.dim, config.image_blocks, config.text_blocks, config.num_classes)
        return replace(shape, **overrides)

    @property
    def joint_dim(self) -> int:
        return self.embed_dim if self.embed_dim is not None else self.d_text

    def image_tower(self) -> int:
        if self.image_tower_params is not None:
            return self.image_tower_params
        return self.d_feat * self.d_image + self.image_blocks * self.d_image**2

    def text_tower(self) -> int:
        return self.text_blocks * self.d_text**2 + self.num_classes * self.d_text

    def total(self) -> int:
        if self.total_params is not None:
            return self.total_params
        return self.image_tower() + self.text_tower()


def lora_param_count(d_in: int, d_out: int, rank: int, blocks: int = 1) -> int:
    return blocks * rank * (d_in + d_out)


def linear_head_param_count(dim: int, num_classes: int) -> int:
    return (dim + 1) * num_classes


def attention_adapter_param_count(dim: int, width: int) -> int:
    return 2 * dim * width + width + dim


def count_params(shape: ModelShape, mode: AdaptationMode) -> int:
    """Exact trainable (= transferred) parameter count of ``mode`` on ``shape``."""
    if mode.kind == "flora":
        total = 0
        if "text" in mode.lora_targets:
            total += lora_param_count(shape.d_text, shape.d_text, mode.rank, shape.text_blocks)
        if "image" in mode.lora_targets:
            total += lora_param_count(shape.d_image, shape.d_image, mode.rank, shape.image_blocks)
        return total
    if mode.kind == "lc":
        return linear_head_param_count(shape.joint_dim, shape.num_classes)
    if mode.kind == "vm_lc":
        return shape.image_tower() + linear_head_param_count(shape.joint_dim, shape.num_classes)
    if mode.kind == "aa":
        return attention_adapter_param_count(shape.joint_dim, mode.aa_width)
    return shape.total()
