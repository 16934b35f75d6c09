"""Two-branch attention network over text and teacher knowledge.

Each branch runs a Reading stack built from masked attention (MMHSA),
unmasked attention (MHSA) and residual links. The two outputs are stacked
teacher-first, passed through a masked fusion attention block, mean-pooled,
projected by the bottleneck and finally by the output layer to one logit
per label.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import EmbeddingTable, encode_tokens
from .errors import ConfigError, ShapeError
from .teacher import TeacherKnowledge
from .tensor import GradTape, Node

MMHSA = "MMHSA"
MHSA = "MHSA"
RESIDUAL = "R"

# Config ID -> (use_teacher, reading stack)
PRESETS: dict[int, tuple[bool, tuple[str, ...]]] = {
    0: (False, ()),
    1: (True, ()),
    2: (True, (MMHSA, RESIDUAL)),
    3: (True, (MHSA, RESIDUAL)),
    4: (True, (MHSA, RESIDUAL, MMHSA)),
    5: (True, (MMHSA, MHSA)),
    6: (True, (MMHSA, RESIDUAL, MHSA)),
}

BRANCHES = ("teacher", "text")
BLOCK_WEIGHTS = ("wq", "wk", "wv", "wmh")


def stack_label(stack: Sequence[str]) -> str:
    return "+".join(stack) if stack else "-"


@dataclass(frozen=True)
class AblationConfig:
    use_teacher: bool
    reading_stack: tuple[str, ...]

    @classmethod
    def preset(cls, config_id: int) -> "AblationConfig":
        if config_id not in PRESETS:
            raise ConfigError(f"unknown ablation preset {config_id}; expected 0-6")
        use_teacher, stack = PRESETS[config_id]
        return cls(use_teacher, stack)

    def __post_init__(self):
        for layer in self.reading_stack:
            if layer not in (MMHSA, MHSA, RESIDUAL):
                raise ConfigError(f"unknown reading layer {layer!r}")
        attn = [layer for layer in self.reading_stack if layer != RESIDUAL]
        if len(set(attn)) != len(attn):
            raise ConfigError("each attention kind may appear once per reading stack")
        if self.reading_stack and self.reading_stack[0] == RESIDUAL:
            raise ConfigError("a residual link needs a preceding attention block")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    num_labels: int
    h: int = 4
    d_bottleneck: int | None = None
    max_text_len: int = 500
    max_teacher_rows: int = 64
    ablation: int = 6
    fusion_attention: bool = True
    init_gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("d_model", "num_labels", "h", "max_text_len", "max_teacher_rows"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.h:
            raise ConfigError(f"d_model={self.d_model} is not divisible by h={self.h}")
        if self.d_bottleneck is None:
            object.__setattr__(self, "d_bottleneck", max(1, self.d_model // 2))
        if self.d_bottleneck <= 0:
            raise ConfigError("d_bottleneck must be positive")
        if not self.init_gain > 0:
            raise ConfigError("init_gain must be positive")
        AblationConfig.preset(self.ablation)

    @property
    def d_k(self) -> int:
        return self.d_model // self.h

    @property
    def ablation_config(self) -> AblationConfig:
        return AblationConfig.preset(self.ablation)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Every parameter block, in canonical order."""
    d = config.d_model
    shapes: dict[str, tuple[int, int]] = {}
    for branch in BRANCHES:
        for kind in (MMHSA, MHSA):
            for w in BLOCK_WEIGHTS:
                shapes[f"{branch}.{kind.lower()}.{w}"] = (d, d)
    for w in BLOCK_WEIGHTS:
        shapes[f"fusion.{w}"] = (d, d)
    shapes["w_hb"] = (d, config.d_bottleneck)
    shapes["w_out"] = (config.d_bottleneck, config.num_labels)
    return shapes


def init_params(config: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Uniform on ``[-g/sqrt(d_model), g/sqrt(d_model)]`` with ``g = init_gain``.

    Blocks are drawn in canonical order from one seeded generator. Deep
    presets fit far better with ``init_gain=sqrt(3)``, which keeps the
    activation variance of each matmul unchanged.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    bound = config.init_gain / math.sqrt(config.d_model)
    return {name: rng.uniform(-bound, bound, size=shape) for name, shape in param_shapes(config).items()}


def block_params(params: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {w: params[f"{prefix}.{w}"] for w in BLOCK_WEIGHTS}


def used_blocks(config: ModelConfig) -> set[str]:
    """Names of the attention/projection blocks that a preset wires in."""
    ab = config.ablation_config
    blocks = {"w_hb", "w_out"}
    if config.fusion_attention:
        blocks.add("fusion")
    branches = BRANCHES if ab.use_teacher else ("text",)
    for branch in branches:
        for layer in ab.reading_stack:
            if layer != RESIDUAL:
                blocks.add(f"{branch}.{layer.lower()}")
    return blocks


def block_of(param_name: str) -> str:
    return param_name.rsplit(".", 1)[0] if param_name.count(".") else param_name


# --------------------------------------------------------------------------
# Forward pass on a tape
# --------------------------------------------------------------------------


def attention_block(tape: GradTape, x: Node, block: Mapping[str, Node], h: int, masked: bool) -> Node:
    """Multi-head self attention followed by ``tanh(concat(heads) @ W_mh)``."""
    n, d = x.shape
    if d % h:
        raise ShapeError(f"d_model={d} is not divisible by h={h}")
    d_k = d // h
    q = tape.split_heads(tape.matmul(x, block["wq"]), h)
    k = tape.split_heads(tape.matmul(x, block["wk"]), h)
    v = tape.split_heads(tape.matmul(x, block["wv"]), h)
    score = tape.scale(tape.matmul_nt(q, k), 1.0 / math.sqrt(d_k))
    if masked:
        score = tape.causal_mask(score)
    heads = tape.matmul(tape.softmax(score), v)
    return tape.tanh(tape.matmul(tape.concat_heads(heads), block["wmh"]))


def reading_forward(tape: GradTape, x: Node, branch: Mapping[str, Mapping[str, Node]], stack: Sequence[str],
                    h: int) -> Node:
    """Apply a reading stack; ``branch`` maps ``"mmhsa"``/``"mhsa"`` to block params.

    A residual layer adds the input of the attention block just before it.
    """
    out = x
    block_input = None
    for layer in stack:
        if layer == RESIDUAL:
            if block_input is None:
                raise ConfigError("residual link without a preceding attention block")
            out = tape.add(block_input, out)
            block_input = None
        else:
            block_input = out
            out = attention_block(tape, out, branch[layer.lower()], h, masked=(layer == MMHSA))
    return out


def interaction_forward(tape: GradTape, teacher_out: Node | None, text_out: Node, fusion: Mapping[str, Node] | None,
                        w_hb: Node, h: int) -> Node:
    """Stack teacher rows above text rows, fuse, mean-pool, project to the bottleneck."""
    if teacher_out is not None and teacher_out.shape[1] != text_out.shape[1]:
        raise ShapeError(f"teacher width {teacher_out.shape[1]} != text width {text_out.shape[1]}")
    seq = text_out if teacher_out is None else tape.concat_rows([teacher_out, text_out])
    if fusion is not None:
        seq = attention_block(tape, seq, fusion, h, masked=True)
    return tape.matmul(tape.mean_rows(seq), w_hb)


def predict_scores(tape: GradTape, fused: Node, w_out: Node) -> Node:
    if fused.shape[1] != w_out.shape[0]:
        raise ShapeError(f"fused width {fused.shape[1]} != output rows {w_out.shape[0]}")
    return tape.matmul(fused, w_out)


def softmax_view(logits: np.ndarray) -> np.ndarray:
    """Softmax over labels, for reporting only; training uses raw logits."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    e = np.exp(z - z.max())
    return e / e.sum()


def teacher_matrix(teacher: TeacherKnowledge | None, config: ModelConfig) -> np.ndarray:
    if teacher is None:
        return np.zeros((1, config.d_model))
    enc = teacher.encoding[: config.max_teacher_rows]
    if enc.shape[1] != config.d_model:
        raise ShapeError(f"teacher encoding width {enc.shape[1]} != d_model {config.d_model}")
    return enc


@dataclass
class Forward:
    tape: GradTape
    logits: Node
    text_reading: Node
    teacher_reading: Node | None


def model_forward(tokens: Sequence[int], teacher: TeacherKnowledge | None, params: Mapping[str, np.ndarray],
                  config: ModelConfig, table: EmbeddingTable) -> Forward:
    if table.d_model != config.d_model:
        raise ConfigError(f"embedding width {table.d_model} != d_model {config.d_model}")
    ab = config.ablation_config
    tape = GradTape()
    names = set(used_blocks(config))

    def block(prefix):
        return {w: tape.param(f"{prefix}.{w}", params[f"{prefix}.{w}"]) for w in BLOCK_WEIGHTS}

    def branch(name):
        return {kind.lower(): block(f"{name}.{kind.lower()}") for kind in (MMHSA, MHSA)
                if f"{name}.{kind.lower()}" in names}

    text = tape.constant(encode_tokens(list(tokens)[: config.max_text_len], table), "E_text")
    text_out = reading_forward(tape, text, branch("text"), ab.reading_stack, config.h)
    teacher_out = None
    if ab.use_teacher:
        t = tape.constant(teacher_matrix(teacher, config), "E_teacher")
        teacher_out = reading_forward(tape, t, branch("teacher"), ab.reading_stack, config.h)
    fusion = block("fusion") if config.fusion_attention else None
    fused = interaction_forward(tape, teacher_out, text_out, fusion, tape.param("w_hb", params["w_hb"]), config.h)
    logits = predict_scores(tape, fused, tape.param("w_out", params["w_out"]))
    # register unused blocks so backward reports a zero gradient for them
    for name, value in params.items():
        tape.param(name, value)
    return Forward(tape, logits, text_out, teacher_out)


def predict_logits(tokens, teacher, params, config, table) -> np.ndarray:
    return model_forward(tokens, teacher, params, config, table).logits.value.reshape(-1)
