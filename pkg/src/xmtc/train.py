"""Loss, optimizer, training loop and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, EmbeddingTable
from .errors import CheckpointError, ConfigError, NumericError, ShapeError
from .model import ModelConfig, init_params, model_forward, param_shapes
from .teacher import TeacherKnowledge
from .tensor import backward, dump_matrix, load_matrix

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


def softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def ova_loss(logits, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """One-vs-all logistic loss summed over labels, and its gradient in the logits.

    Uses ``softplus(Y) - y*Y``, which equals the per-label Bernoulli
    log-loss and stays finite for large ``|Y|``.
    """
    y_hat = np.asarray(logits, dtype=np.float64).reshape(-1)
    if np.any(np.isnan(y_hat)):
        raise NumericError("NaN in logits")
    y = np.zeros_like(y_hat)
    y[list(labels)] = 1.0
    loss = float(np.sum(softplus(y_hat) - y * y_hat))
    return loss, sigmoid(y_hat) - y


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], lr: float = 1e-4, **kw) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, lr, **kw)


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for k, p in params.items():
        if grads[k].shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"shape mismatch for {k}: param {p.shape}, grad {grads[k].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# --------------------------------------------------------------------------
# Gradients for one example / one batch
# --------------------------------------------------------------------------


def example_loss(tokens, labels, teacher, params, config: ModelConfig, table: EmbeddingTable) -> float:
    return ova_loss(model_forward(tokens, teacher, params, config, table).logits.value, labels)[0]


def example_loss_and_grads(tokens, labels, teacher, params, config: ModelConfig, table: EmbeddingTable):
    fwd = model_forward(tokens, teacher, params, config, table)
    loss, dlogits = ova_loss(fwd.logits.value, labels)
    grads = backward(fwd.tape, fwd.logits, dlogits.reshape(1, -1))
    return loss, grads


def batch_loss_and_grads(batch: Sequence[int], corpus: Corpus, teachers, params, config, table,
                         executor: ThreadPoolExecutor | None = None):
    """Summed loss and gradients over ``batch``; summation is in batch order."""

    def one(i):
        ex = corpus[i]
        teacher = teachers[i] if teachers is not None else None
        return example_loss_and_grads(ex.tokens, ex.labels, teacher, params, config, table)

    results = list(executor.map(one, batch)) if executor is not None else [one(i) for i in batch]
    total = 0.0
    grads = {k: np.zeros_like(p) for k, p in params.items()}
    for loss, g in results:
        total += loss
        for k in grads:
            grads[k] += g[k]
    return total, grads


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-4
    decay: float = 0.5
    patience: int = 3
    threshold: float = 1e-4
    seed: int = 0
    shuffle: bool = True
    reduction: str = "sum"

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.patience <= 0:
            raise ConfigError("epochs, batch_size and patience must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError("decay must lie in (0, 1]")
        if self.threshold < 0:
            raise ConfigError("threshold must be non-negative")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("reduction must be 'sum' or 'mean'")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    state: AdamState
    history: list[dict] = field(default_factory=list)


class TrainingError(RuntimeError):
    pass


def train(corpus: Corpus, teachers: Sequence[TeacherKnowledge] | None, table: EmbeddingTable,
          model_config: ModelConfig, train_config: TrainConfig, run_dir=None, threads: int = 1,
          on_epoch: Callable[[dict], None] | None = None, evaluate_fn: Callable[[dict], dict] | None = None
          ) -> TrainResult:
    """Minibatch Adam over ``corpus``.

    The learning rate is multiplied by ``decay`` once the epoch-mean loss has
    failed to improve by a relative ``threshold`` for ``patience`` epochs.
    When ``run_dir`` is given, ``checkpoint.bin`` is rewritten after every
    epoch and one JSON line per epoch is appended to ``log.jsonl``.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train on an empty corpus")
    if corpus.num_labels != model_config.num_labels:
        raise ConfigError(f"corpus has L={corpus.num_labels}, model expects {model_config.num_labels}")
    use_teacher = model_config.ablation_config.use_teacher
    if use_teacher:
        if teachers is None or len(teachers) != len(corpus):
            raise ConfigError("teacher knowledge must cover every training example")
    else:
        teachers = None

    params = init_params(model_config)
    state = AdamState.zeros_like(params, lr=train_config.lr)
    rng = np.random.default_rng(train_config.seed)
    history: list[dict] = []
    best = np.inf
    stale = 0
    log_fh = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "log.jsonl", "w", encoding="utf-8")
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        n = len(corpus)
        for epoch in range(1, train_config.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(n) if train_config.shuffle else np.arange(n)
            epoch_loss = 0.0
            for b, start in enumerate(range(0, n, train_config.batch_size)):
                batch = [int(i) for i in order[start:start + train_config.batch_size]]
                loss, grads = batch_loss_and_grads(batch, corpus, teachers, params, model_config, table, executor)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite loss {loss} in epoch {epoch}, batch {b} "
                                        f"(examples {batch[:5]}{'...' if len(batch) > 5 else ''})")
                if train_config.reduction == "mean":
                    grads = {k: g / len(batch) for k, g in grads.items()}
                adam_step(params, grads, state)
                epoch_loss += loss
            mean_loss = epoch_loss / n
            record = {"epoch": epoch, "mean_loss": mean_loss, "lr": state.lr,
                      "wall_time": time.perf_counter() - t0}
            if evaluate_fn is not None:
                record.update(evaluate_fn(params))
            history.append(record)

            if mean_loss < best * (1.0 - train_config.threshold):
                best = mean_loss
                stale = 0
            else:
                stale += 1
                if stale >= train_config.patience:
                    state.lr *= train_config.decay
                    stale = 0
                    log.info("epoch %d: lr decayed to %g", epoch, state.lr)

            if run_dir is not None:
                save_checkpoint(run_dir / "checkpoint.bin", params, state, model_config, train_config, epoch)
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if on_epoch is not None:
                on_epoch(record)
    finally:
        if executor is not None:
            executor.shutdown()
        if log_fh is not None:
            log_fh.close()
    return TrainResult(params, state, history)


# --------------------------------------------------------------------------
# Checkpoints
#
# layout: MAGIC, <u32 version>, <u64 manifest length>, manifest JSON,
#         <u32 matrix count>, then per matrix <u32 name length> name dump,
#         and a trailing 32-byte SHA-256 of everything before it.
# --------------------------------------------------------------------------

MAGIC = b"XMTCCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    state: AdamState
    model_config: ModelConfig
    train_config: dict
    epoch: int


def save_checkpoint(path, params, state: AdamState, model_config: ModelConfig, train_config=None, epoch: int = 0):
    manifest = {
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict() if hasattr(train_config, "to_dict") else (train_config or {}),
        "seed": model_config.seed,
        "epoch": epoch,
        "adam": {"step": state.step, "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
        "names": list(params),
    }
    body = bytearray(MAGIC)
    body += struct.pack("<I", VERSION)
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body += struct.pack("<Q", len(mbytes)) + mbytes
    entries = [(f"param/{k}", params[k]) for k in params]
    entries += [(f"m/{k}", state.m[k]) for k in params]
    entries += [(f"v/{k}", state.v[k]) for k in params]
    body += struct.pack("<I", len(entries))
    for name, m in entries:
        nb = name.encode("utf-8")
        body += struct.pack("<I", len(nb)) + nb + dump_matrix(m)
    body += hashlib.sha256(body).digest()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(body))
    tmp.replace(path)


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 + 8 + 32 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted file)")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        (mlen,) = struct.unpack_from("<Q", body, off)
        off += 8
        manifest = json.loads(body[off:off + mlen].decode("utf-8"))
        off += mlen
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        mats = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            mats[name], off = load_matrix(body, off)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}") from None
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes in checkpoint")

    config = ModelConfig.from_dict(manifest["model_config"])
    if expect is not None and expect != config:
        raise ConfigError(f"{path}: checkpoint config {config} does not match requested {expect}")
    names = manifest["names"]
    shapes = param_shapes(config)
    try:
        params = {k: mats[f"param/{k}"] for k in names}
        m = {k: mats[f"m/{k}"] for k in names}
        v = {k: mats[f"v/{k}"] for k in names}
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing matrix {exc}") from None
    for k in names:
        if k not in shapes or params[k].shape != shapes[k]:
            raise CheckpointError(f"{path}: block {k} has unexpected shape {params[k].shape}")
    adam = manifest["adam"]
    state = AdamState(m, v, adam["step"], adam["lr"], adam["beta1"], adam["beta2"], adam["eps"])
    return Checkpoint(params, state, config, manifest["train_config"], manifest["epoch"])
