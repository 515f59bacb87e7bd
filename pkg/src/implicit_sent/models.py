"""The five sentence classifiers and their checkpoint format.

All models share the bottom and top: a pretrained embedding lookup and a
dense softmax head over the three polarity classes.  Only the body differs:

* ``dnn``: mean of the real-token embeddings, then three dense layers.
* ``cnn``: zero-padded conv, unpadded conv, global max pool.
* ``lstm``: unidirectional LSTM, hidden state at the last real token.
* ``bilstm``: bidirectional LSTM, final forward and backward states.
* ``bilstm_attention``: bidirectional LSTM states pooled by word-level
  attention, then one dense synthesis layer.

Dropout sits between the body and the head in every model.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .errors import ConfigError, ParseError, ShapeError
from .layers import (
    AttentionPooling,
    Conv1DLayer,
    DenseLayer,
    DropoutLayer,
    EmbeddingLayer,
    Layer,
    RecurrentEncoder,
    maxpool1d,
)

MODEL_KINDS = ("dnn", "cnn", "lstm", "bilstm", "bilstm_attention")
RECURRENT_KINDS = ("lstm", "bilstm", "bilstm_attention")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture choice plus hyperparameters; defaults are the reference settings."""

    kind: str = "lstm"
    embedding_dim: int = 300
    dropout: float = 0.5
    dnn_dims: tuple[int, ...] = (128, 64, 32)
    lstm_hidden: int = 64
    conv_filters: int = 300
    kernel_width: int = 3
    max_len: int = 64
    num_classes: int = 3
    attention_dim: int | None = None
    synthesis_dim: int = 64
    cell: str = "lstm"
    trainable_embeddings: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {', '.join(MODEL_KINDS)}")
        object.__setattr__(self, "dnn_dims", tuple(int(d) for d in self.dnn_dims))
        dims = (self.embedding_dim, self.lstm_hidden, self.conv_filters, self.kernel_width, self.max_len, self.synthesis_dim, *self.dnn_dims)
        if any(d < 1 for d in dims) or not self.dnn_dims:
            raise ConfigError("all model dimensions must be positive")
        if self.attention_dim is not None and self.attention_dim < 1:
            raise ConfigError("attention_dim must be positive")
        if self.num_classes != 3:
            raise ConfigError("the polarity task has exactly 3 classes")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.cell not in ("lstm", "gru"):
            raise ConfigError(f"unknown recurrent cell {self.cell!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dnn_dims"] = list(self.dnn_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model spec fields: {sorted(unknown)}")
        return cls(**d)


class ClassifierModel(Layer):
    """Embedding bottom, architecture-specific body, dropout and softmax head."""

    _children = ("embedding", "dnn1", "dnn2", "dnn3", "conv1", "conv2", "encoder", "attention", "synthesis", "head")

    def __init__(self, spec: ModelSpec, embedding: EmbeddingLayer, rng: np.random.Generator):
        self.spec = spec
        dtype = np.dtype(spec.dtype).type
        self.embedding = embedding
        for name in self._children[1:]:
            setattr(self, name, None)
        self.dropout = DropoutLayer(spec.dropout)
        E = spec.embedding_dim
        kind = spec.kind
        if kind == "dnn":
            dims = (E, *spec.dnn_dims)
            if len(spec.dnn_dims) != 3:
                raise ConfigError("the dnn body has exactly three dense layers")
            for i in range(3):
                setattr(self, f"dnn{i + 1}", DenseLayer(dims[i], dims[i + 1], "relu", rng=rng, dtype=dtype))
            width = dims[-1]
        elif kind == "cnn":
            F, k = spec.conv_filters, spec.kernel_width
            self.conv1 = Conv1DLayer(E, F, k, "same_zero", "relu", rng=rng, dtype=dtype)
            self.conv2 = Conv1DLayer(F, F, k, "valid", "relu", rng=rng, dtype=dtype)
            width = F
        else:
            bi = kind != "lstm"
            self.encoder = RecurrentEncoder(E, spec.lstm_hidden, bidirectional=bi, cell=spec.cell, rng=rng, dtype=dtype)
            width = self.encoder.output_dim
            if kind == "bilstm_attention":
                self.attention = AttentionPooling(width, spec.attention_dim, rng=rng, dtype=dtype)
                self.synthesis = DenseLayer(width, spec.synthesis_dim, "tanh", rng=rng, dtype=dtype)
                width = spec.synthesis_dim
        self.head = DenseLayer(width, spec.num_classes, "none", rng=rng, dtype=dtype)

    # -- forward ---------------------------------------------------------

    def _prepare(self, token_ids, mask):
        ids = np.asarray(token_ids)
        if ids.ndim != 2:
            raise ShapeError(f"token ids must be [batch, length], got {ids.shape}")
        if ids.shape[1] > self.spec.max_len:
            raise ShapeError(f"sequence length {ids.shape[1]} exceeds max_len {self.spec.max_len}")
        if mask is None:
            mask = np.ones(ids.shape, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != ids.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match ids {ids.shape}")
        if ids.shape[1] == 0 or not mask.any(axis=1).all():
            raise ShapeError("every sentence needs at least one real token")
        return ids, mask

    def logits(self, token_ids, mask=None, mode: str = "infer", rng=None) -> Variable:
        ids, mask = self._prepare(token_ids, mask)
        kind = self.spec.kind
        if kind == "cnn" and ids.shape[1] < self.spec.kernel_width:
            pad = self.spec.kernel_width - ids.shape[1]
            ids = np.pad(ids, ((0, 0), (0, pad)))
            mask = np.pad(mask, ((0, 0), (0, pad)))
        x = self.embedding(ids)
        if kind == "dnn":
            weights = mask / mask.sum(axis=1, keepdims=True)
            h = ad.weighted_sum(Variable(weights.astype(x.dtype)), x)
            for layer in (self.dnn1, self.dnn2, self.dnn3):
                h = layer(h)
        elif kind == "cnn":
            # Zero padded inputs so the first conv sees the same zeros as
            # its own boundary padding.
            x = ad.where(mask, x, Variable(np.zeros(x.shape, dtype=x.dtype)))
            h1 = self.conv1(x)
            h1 = ad.where(mask, h1, Variable(np.zeros(h1.shape, dtype=h1.dtype)))
            h2 = self.conv2(h1)
            k = self.spec.kernel_width
            lengths = mask.sum(axis=1)
            valid = np.maximum(lengths - k + 1, 1)
            pool_mask = np.arange(h2.shape[1])[None, :] < valid[:, None]
            h = maxpool1d(h2, pool_mask)
        else:
            outputs, final = self.encoder(x, mask)
            if kind == "bilstm_attention":
                s, _ = self.attention(outputs, mask)
                h = self.synthesis(s)
            else:
                h = final
        h = self.dropout(h, rng=rng, mode=mode)
        return self.head(h)

    def forward(self, token_ids, mask=None, mode: str = "infer", rng=None) -> Variable:
        """Class probabilities ``[batch, 3]``; ``mode="train"`` enables dropout."""
        return ad.softmax_rows(self.logits(token_ids, mask, mode=mode, rng=rng))

    __call__ = forward

    def attention_weights(self, token_ids, mask=None) -> np.ndarray:
        if self.spec.kind != "bilstm_attention":
            raise ConfigError("only bilstm_attention models have attention weights")
        ids, mask = self._prepare(token_ids, mask)
        with ad.no_grad():
            outputs, _ = self.encoder(self.embedding(ids), mask)
            _, alpha = self.attention(outputs, mask)
        return alpha.value

    def predict_proba(self, token_ids, mask=None) -> np.ndarray:
        with ad.no_grad():
            return self.forward(token_ids, mask).value

    def predict(self, token_ids, mask=None) -> np.ndarray:
        """Argmax label per sentence; ties resolve to the lowest class index."""
        return predict_labels(self.predict_proba(token_ids, mask))

    # -- parameters ------------------------------------------------------

    def parameter_count(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(state) != set(params):
            missing, extra = set(params) - set(state), set(state) - set(params)
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, value in state.items():
            p = params[name]
            value = np.asarray(value)
            if value.shape != p.shape:
                raise ShapeError(f"parameter {name}: expected shape {p.shape}, got {value.shape}")
            p.value = value.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def predict_labels(probs) -> np.ndarray:
    # np.argmax returns the first maximum, which is the declared tie-break.
    return np.argmax(np.asarray(probs), axis=1)


def build_model(spec: ModelSpec, embedding_table, seed: int = 0) -> ClassifierModel:
    """Instantiate ``spec`` on top of a ``[vocab, embedding_dim]`` table."""
    table = np.asarray(getattr(embedding_table, "matrix", embedding_table))
    if table.ndim != 2 or table.shape[1] != spec.embedding_dim:
        raise ConfigError(f"embedding table dim {table.shape[-1] if table.ndim else None} != spec dim {spec.embedding_dim}")
    embedding = EmbeddingLayer(table, trainable=spec.trainable_embeddings, dtype=np.dtype(spec.dtype).type)
    rng = np.random.default_rng(seed)
    return ClassifierModel(spec, embedding, rng)


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
# then each tensor as contiguous little-endian float64 in header order.
# ---------------------------------------------------------------------------

MAGIC = b"ISNTCKP1"


def vocab_fingerprint(words, dim: int | None = None) -> str:
    h = hashlib.sha256()
    for w in words:
        h.update(w.encode("utf-8"))
        h.update(b"\n")
    if dim is not None:
        h.update(f"dim={dim}".encode())
    return h.hexdigest()


def save_checkpoint(path, model: ClassifierModel, vocab_hash: str, seed: int, extra: dict | None = None) -> None:
    state = model.state_dict()
    tensors = [{"name": name, "shape": list(v.shape)} for name, v in state.items()]
    header = {
        "format": 1,
        "spec": model.spec.to_dict(),
        "vocab_hash": vocab_hash,
        "seed": int(seed),
        "tensors": tensors,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in state:
            fh.write(np.ascontiguousarray(state[name], dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt checkpoint header") from exc
    offset = 16 + n
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise ParseError(f"{path}: truncated tensor {entry['name']}")
        state[entry["name"]] = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(data):
        raise ParseError(f"{path}: trailing bytes after last tensor")
    return header, state


def load_checkpoint(path, embedding_table, vocab_hash: str | None = None) -> tuple[ClassifierModel, dict]:
    """Rebuild a model from ``path``; shapes are validated against the stored architecture.

    When ``vocab_hash`` is given it must match the one stored at save time.
    """
    header, state = read_checkpoint(path)
    if vocab_hash is not None and header["vocab_hash"] != vocab_hash:
        raise ConfigError(
            "checkpoint was trained with a different vocabulary "
            f"(stored {header['vocab_hash'][:12]}, given {vocab_hash[:12]})"
        )
    spec = ModelSpec.from_dict(header["spec"])
    model = build_model(spec, embedding_table, seed=header["seed"])
    model.load_state_dict(state)
    return model, header
