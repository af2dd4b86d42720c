"""Small differentiable victim model with native optimizers and checkpoints.

The backbone is deliberately minimal: mean-pooled token embeddings, an
optional tanh hidden layer, and a linear softmax head. Two task heads are
supported: a C-way classifier (one label per document) and a next-token
predictor (per-position V-way softmax over a causal mean-pooled context).
Everything is plain numpy; gradients are analytic.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .corpus import DocumentSet, TokenBatch, TokenSeq, Vocab, encode_documents

CHECKPOINT_MAGIC = b"SELC"
CHECKPOINT_VERSION = 1

TASK_CLASSIFICATION = "classification"
TASK_NEXT_TOKEN = "next_token"
TASKS = (TASK_CLASSIFICATION, TASK_NEXT_TOKEN)

OPTIMIZER_KINDS = ("sgd", "adam", "adamw")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int
    num_classes: int = 2
    hidden_layer: bool = False
    task: str = TASK_CLASSIFICATION

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.vocab_size < 3:
            raise ValueError("vocab_size must be at least 3")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be at least 2")
        if self.task == TASK_CLASSIFICATION and self.num_classes < 2:
            raise ValueError("num_classes must be at least 2 for classification")

    @property
    def head_dim(self) -> int:
        """Output dimension: C for classification, V for next-token."""
        if self.task == TASK_NEXT_TOKEN:
            return self.vocab_size
        return self.num_classes

    @property
    def last_layer_dim(self) -> int:
        """Flattened size of (head weight, head bias)."""
        return self.head_dim * self.embed_dim + self.head_dim

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "V": self.vocab_size,
            "h": self.embed_dim,
            "C": self.num_classes,
            "hidden_layer": self.hidden_layer,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(
            vocab_size=int(data["V"]),
            embed_dim=int(data["h"]),
            num_classes=int(data["C"]),
            hidden_layer=bool(data["hidden_layer"]),
            task=str(data["task"]),
        )


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    hidden_w: np.ndarray | None = None
    hidden_b: np.ndarray | None = None

    def blocks(self) -> dict[str, np.ndarray]:
        """Parameter blocks in canonical order."""
        out = {"embedding": self.embedding}
        if self.config.hidden_layer:
            out["hidden_w"] = self.hidden_w
            out["hidden_b"] = self.hidden_b
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            embedding=self.embedding.copy(),
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
            hidden_w=None if self.hidden_w is None else self.hidden_w.copy(),
            hidden_b=None if self.hidden_b is None else self.hidden_b.copy(),
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            config=self.config,
            embedding=self.embedding.astype(dtype),
            head_w=self.head_w.astype(dtype),
            head_b=self.head_b.astype(dtype),
            hidden_w=None if self.hidden_w is None else self.hidden_w.astype(dtype),
            hidden_b=None if self.hidden_b is None else self.hidden_b.astype(dtype),
        )

    def compatible_with(self, other: "ModelParams") -> bool:
        """Interpolation compatibility: identical configs."""
        return self.config == other.config

    def validate(self) -> None:
        expected = _expected_shapes(self.config)
        for name, block in self.blocks().items():
            if block is None or tuple(block.shape) != expected[name]:
                raise ValueError(f"block {name} has wrong shape")
            if not np.isfinite(block).all():
                raise ValueError(f"block {name} contains non-finite entries")

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name, block in self.blocks().items():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(block, dtype=np.float32).tobytes())
        return digest.hexdigest()


def _expected_shapes(config: ModelConfig) -> dict[str, tuple]:
    shapes = {"embedding": (config.vocab_size, config.embed_dim)}
    if config.hidden_layer:
        shapes["hidden_w"] = (config.embed_dim, config.embed_dim)
        shapes["hidden_b"] = (config.embed_dim,)
    shapes["head_w"] = (config.head_dim, config.embed_dim)
    shapes["head_b"] = (config.head_dim,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Gaussian weights with std 1/sqrt(h) (unit expected row norm), zero biases."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(config.embed_dim)
    embedding = rng.normal(0.0, scale, (config.vocab_size, config.embed_dim))
    hidden_w = hidden_b = None
    if config.hidden_layer:
        hidden_w = rng.normal(0.0, scale, (config.embed_dim, config.embed_dim))
        hidden_b = np.zeros(config.embed_dim)
    head_w = rng.normal(0.0, scale, (config.head_dim, config.embed_dim))
    head_b = np.zeros(config.head_dim)
    params = ModelParams(
        config=config,
        embedding=embedding.astype(np.float32),
        head_w=head_w.astype(np.float32),
        head_b=head_b.astype(np.float32),
        hidden_w=None if hidden_w is None else hidden_w.astype(np.float32),
        hidden_b=None if hidden_b is None else hidden_b.astype(np.float32),
    )
    return params


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerConfig":
        known = {f: data[f] for f in cls.__dataclass_fields__ if f in data}
        return cls(**known)


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EvalMetrics:
    mean_loss: float
    accuracy: float | None = None
    perplexity: float | None = None

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_loss": self.mean_loss,
            "perplexity": self.perplexity,
        }


@dataclass(frozen=True)
class ForwardPass:
    pooled_hidden: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _scatter_add_rows(dest: np.ndarray, ids: np.ndarray, contrib: np.ndarray) -> None:
    """dest[ids[i]] += contrib[i], vectorized via segment sums.

    Equivalent to np.add.at but orders of magnitude faster for wide rows.
    """
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    boundaries = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    sums = np.add.reduceat(contrib[order], boundaries, axis=0)
    dest[sorted_ids[boundaries]] += sums


def _class_activations(
    params: ModelParams, ids: np.ndarray, lens: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Classification forward: (pooled, post-hidden z, log-probs)."""
    if np.any(lens < 1):
        raise ValueError("every document must have at least 1 token")
    emb = params.embedding[ids]
    mask = np.arange(ids.shape[1])[None, :] < lens[:, None]
    pooled = (emb * mask[:, :, None]).sum(axis=1) / lens[:, None]
    if params.config.hidden_layer:
        z = np.tanh(pooled @ params.hidden_w.T + params.hidden_b)
    else:
        z = pooled
    logits = z @ params.head_w.T + params.head_b
    return pooled, z, _log_softmax(logits)


def _lm_activations(
    params: ModelParams, ids: np.ndarray, lens: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Next-token forward over prediction positions t = 0..s-2.

    Returns (context, z, logp, pos_mask) where context[b, t] is the mean
    embedding of tokens 0..t and pos_mask marks positions with a valid
    target (t + 1 < valid_len).
    """
    if np.any(lens < 2):
        raise ValueError("next-token documents need at least 2 tokens")
    s = ids.shape[1]
    emb = params.embedding[ids]
    tok_mask = np.arange(s)[None, :] < lens[:, None]
    csum = np.cumsum(emb * tok_mask[:, :, None], axis=1)[:, :-1, :]
    counts = np.arange(1, s, dtype=params.embedding.dtype)
    context = csum / counts[None, :, None]
    if params.config.hidden_layer:
        z = np.tanh(context @ params.hidden_w.T + params.hidden_b)
    else:
        z = context
    logits = z @ params.head_w.T + params.head_b
    pos_mask = np.arange(s - 1)[None, :] < (lens - 1)[:, None]
    return context, z, _log_softmax(logits), pos_mask


def forward(params: ModelParams, x: TokenSeq) -> ForwardPass:
    """Single-example forward pass; next-token returns one row per position."""
    if x.valid_len < 1:
        raise ValueError("valid_len must be at least 1")
    ids = np.asarray(x.ids, dtype=np.int64)[None, :]
    lens = np.array([x.valid_len], dtype=np.int64)
    if params.config.task == TASK_CLASSIFICATION:
        _, z, logp = _class_activations(params, ids, lens)
        logits = z[0] @ params.head_w.T + params.head_b
        return ForwardPass(z[0], logits, np.exp(logp[0]))
    _, z, logp, _ = _lm_activations(params, ids, lens)
    keep = x.valid_len - 1
    logits = z[0, :keep] @ params.head_w.T + params.head_b
    return ForwardPass(z[0, :keep], logits, np.exp(logp[0, :keep]))


def loss(params: ModelParams, x: TokenSeq, y=None) -> float:
    """Cross-entropy for one example. Next-token targets default to x itself."""
    ids = np.asarray(x.ids, dtype=np.int64)[None, :]
    lens = np.array([x.valid_len], dtype=np.int64)
    if params.config.task == TASK_CLASSIFICATION:
        if y is None:
            raise ValueError("classification loss needs a label")
        y = int(y)
        if not 0 <= y < params.config.num_classes:
            raise ValueError(
                f"label {y} out of range for {params.config.num_classes} classes"
            )
        _, _, logp = _class_activations(params, ids, lens)
        return float(-logp[0, y])
    _, _, logp, pos_mask = _lm_activations(params, ids, lens)
    target_seq = ids[0] if y is None else np.asarray(y, dtype=np.int64)
    targets = target_seq[1:]
    if targets.min() < 0 or targets.max() >= params.config.vocab_size:
        raise ValueError("target ids out of range for vocabulary")
    nll = -logp[0, np.arange(ids.shape[1] - 1), targets]
    m = pos_mask[0]
    return float(nll[m].sum() / m.sum())


def batch_mean_loss(
    params: ModelParams, ids: np.ndarray, lens: np.ndarray, labels: np.ndarray | None
) -> float:
    """Mean loss over a batch (classification label vector or self-targets)."""
    return float(_per_example_losses(params, ids, lens, labels).mean())


def _per_example_losses(
    params: ModelParams, ids: np.ndarray, lens: np.ndarray, labels: np.ndarray | None
) -> np.ndarray:
    if params.config.task == TASK_CLASSIFICATION:
        _, _, logp = _class_activations(params, ids, lens)
        return -logp[np.arange(len(lens)), labels]
    _, _, logp, pos_mask = _lm_activations(params, ids, lens)
    targets = ids[:, 1:]
    nll = -np.take_along_axis(logp, targets[:, :, None], axis=2)[:, :, 0]
    return (nll * pos_mask).sum(axis=1) / pos_mask.sum(axis=1)


def batch_loss_and_grads(
    params: ModelParams,
    ids: np.ndarray,
    lens: np.ndarray,
    labels: np.ndarray | None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch loss and analytic gradients for every parameter block."""
    cfg = params.config
    dtype = params.embedding.dtype
    n = ids.shape[0]
    grads: dict[str, np.ndarray] = {}
    if cfg.task == TASK_CLASSIFICATION:
        pooled, z, logp = _class_activations(params, ids, lens)
        probs = np.exp(logp)
        loss_val = float(-logp[np.arange(n), labels].mean())
        err = probs.copy()
        err[np.arange(n), labels] -= 1.0
        err /= n
        grads["head_w"] = err.T @ z
        grads["head_b"] = err.sum(axis=0)
        dz = err @ params.head_w
        if cfg.hidden_layer:
            da = dz * (1.0 - z * z)
            grads["hidden_w"] = da.T @ pooled
            grads["hidden_b"] = da.sum(axis=0)
            dpooled = da @ params.hidden_w
        else:
            dpooled = dz
        d_emb = np.zeros_like(params.embedding)
        mask = np.arange(ids.shape[1])[None, :] < lens[:, None]
        rows, cols = np.nonzero(mask)
        contrib = dpooled[rows] / lens[rows, None].astype(dtype)
        _scatter_add_rows(d_emb, ids[rows, cols], contrib)
        grads["embedding"] = d_emb
        return loss_val, grads

    context, z, logp, pos_mask = _lm_activations(params, ids, lens)
    probs = np.exp(logp)
    targets = ids[:, 1:]
    nll = -np.take_along_axis(logp, targets[:, :, None], axis=2)[:, :, 0]
    denom = pos_mask.sum(axis=1)
    loss_val = float(((nll * pos_mask).sum(axis=1) / denom).mean())
    err = probs.copy()
    np.put_along_axis(
        err,
        targets[:, :, None],
        np.take_along_axis(err, targets[:, :, None], axis=2) - 1.0,
        axis=2,
    )
    weight = (pos_mask / (denom[:, None] * n)).astype(dtype)
    err *= weight[:, :, None]
    grads["head_w"] = np.einsum("btv,bth->vh", err, z)
    grads["head_b"] = err.sum(axis=(0, 1))
    dz = err @ params.head_w
    if cfg.hidden_layer:
        da = dz * (1.0 - z * z)
        grads["hidden_w"] = np.einsum("bth,btg->hg", da, context)
        grads["hidden_b"] = da.sum(axis=(0, 1))
        dcontext = da @ params.hidden_w
    else:
        dcontext = dz
    counts = np.arange(1, ids.shape[1], dtype=dtype)
    dcsum = dcontext / counts[None, :, None]
    # token at position u feeds every context t >= u: suffix-sum over t
    dpos = np.flip(np.cumsum(np.flip(dcsum, axis=1), axis=1), axis=1)
    d_emb = np.zeros_like(params.embedding)
    upos_mask = np.arange(ids.shape[1] - 1)[None, :] < (lens - 1)[:, None]
    rows, cols = np.nonzero(upos_mask)
    _scatter_add_rows(d_emb, ids[rows, cols], dpos[rows, cols])
    grads["embedding"] = d_emb
    return loss_val, grads


def optimizer_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState | None,
    opt: OptimizerConfig,
) -> tuple[ModelParams, OptimizerState]:
    """Apply one update in place; moments are tracked per parameter block."""
    if state is None:
        state = OptimizerState()
    blocks = params.blocks()
    lr = opt.learning_rate
    if opt.kind == "sgd":
        for name, block in blocks.items():
            block -= (lr * grads[name]).astype(block.dtype)
        state.step += 1
        return params, state
    t = state.step + 1
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    for name, block in blocks.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(block)
            state.v[name] = np.zeros_like(block)
        m = state.m[name]
        v = state.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + opt.epsilon)
        if opt.kind == "adamw":
            update = update + opt.weight_decay * block
        block -= (lr * update).astype(block.dtype)
    state.step = t
    return params, state


def train(
    initial: ModelParams,
    data: DocumentSet,
    opt: OptimizerConfig,
    vocab: Vocab,
    seq_len: int = 64,
    validation: DocumentSet | None = None,
) -> tuple[ModelParams, list[float]]:
    """Mini-batch training; returns (params, per-epoch mean training loss).

    With a validation set the returned params are the epoch-end snapshot with
    the lowest validation loss (ties broken by the earlier epoch).
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    batch = encode_documents(data, vocab, seq_len)
    labels = None
    if initial.config.task == TASK_CLASSIFICATION:
        labels = data.labels()
        if labels.min() < 0 or labels.max() >= initial.config.num_classes:
            raise ValueError("labels out of range for model head")
    val_batch = val_labels = None
    if validation is not None and len(validation) > 0:
        val_batch = encode_documents(validation, vocab, seq_len)
        if initial.config.task == TASK_CLASSIFICATION:
            val_labels = validation.labels()

    params = initial.copy()
    state: OptimizerState | None = None
    rng = np.random.default_rng(opt.seed)
    trace: list[float] = []
    best_loss = np.inf
    best_params: ModelParams | None = None
    n = len(data)
    for epoch in range(opt.epochs):
        perm = rng.permutation(n)
        epoch_losses = []
        for b, start in enumerate(range(0, n, opt.batch_size)):
            take = perm[start : start + opt.batch_size]
            batch_labels = None if labels is None else labels[take]
            loss_val, grads = batch_loss_and_grads(
                params, batch.ids[take], batch.valid_len[take], batch_labels
            )
            if np.isnan(loss_val):
                raise RuntimeError(f"NaN loss in epoch {epoch} batch {b}")
            params, state = optimizer_step(params, grads, state, opt)
            epoch_losses.append(loss_val)
        trace.append(float(np.mean(epoch_losses)))
        if val_batch is not None:
            val_loss = batch_mean_loss(
                params, val_batch.ids, val_batch.valid_len, val_labels
            )
            if val_loss < best_loss:
                best_loss = val_loss
                best_params = params.copy()
    if best_params is not None:
        return best_params, trace
    return params, trace


def evaluate(
    params: ModelParams, test: DocumentSet, vocab: Vocab, seq_len: int = 64
) -> EvalMetrics:
    """Accuracy/mean loss for classification; mean loss/perplexity otherwise."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    batch = encode_documents(test, vocab, seq_len)
    if params.config.task == TASK_CLASSIFICATION:
        labels = test.labels()
        _, _, logp = _class_activations(params, batch.ids, batch.valid_len)
        pred = logp.argmax(axis=1)
        mean_loss = float(-logp[np.arange(len(test)), labels].mean())
        return EvalMetrics(
            mean_loss=mean_loss, accuracy=float((pred == labels).mean())
        )
    losses = _per_example_losses(params, batch.ids, batch.valid_len, None)
    mean_loss = float(losses.mean())
    return EvalMetrics(mean_loss=mean_loss, perplexity=float(np.exp(mean_loss)))


def save_checkpoint(
    params: ModelParams, path: str | Path, meta: dict | None = None
) -> None:
    """Binary little-endian checkpoint; tensors stored row-major float32."""
    params.validate()
    cfg = params.config
    tensors = [
        {"name": name, "shape": list(block.shape)}
        for name, block in params.blocks().items()
    ]
    header = dict(cfg.to_dict(), tensors=tensors)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for block in params.blocks().values():
            fh.write(np.ascontiguousarray(block, dtype="<f4").tobytes())
    if meta is not None:
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True))


def _read_exact(fh, count: int, what: str = "checkpoint") -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ValueError(f"unexpected end of {what}")
    return data


def load_checkpoint(path: str | Path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(
                f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}"
            )
        version, header_len = struct.unpack("<II", _read_exact(fh, 8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(_read_exact(fh, header_len).decode("utf-8"))
        config = ModelConfig.from_dict(header)
        expected = _expected_shapes(config)
        loaded: dict[str, np.ndarray] = {}
        declared = [t["name"] for t in header["tensors"]]
        if declared != list(expected):
            raise ValueError(
                f"checkpoint tensors {declared} do not match config blocks"
            )
        for tensor in header["tensors"]:
            shape = tuple(tensor["shape"])
            if shape != expected[tensor["name"]]:
                raise ValueError(
                    f"tensor {tensor['name']} shape {shape} does not match header"
                )
            count = int(np.prod(shape))
            raw = _read_exact(fh, 4 * count)
            loaded[tensor["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return ModelParams(
        config=config,
        embedding=loaded["embedding"],
        head_w=loaded["head_w"],
        head_b=loaded["head_b"],
        hidden_w=loaded.get("hidden_w"),
        hidden_b=loaded.get("hidden_b"),
    )
