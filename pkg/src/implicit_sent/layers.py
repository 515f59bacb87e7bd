"""Neural building blocks: embedding, dense, dropout, 1-D convolution,
max pooling, recurrent cells, sequence encoders and word-level attention.

Every layer owns its parameters as :class:`~implicit_sent.autodiff.Variable`
objects and exposes them through ``named_parameters()``.  Sequence tensors
use the ``[batch, time, features]`` layout; masks are boolean ``[batch, time]``
arrays marking real (non-padded) positions.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .errors import ConfigError, ContractError, ShapeError

ACTIVATIONS = {
    "tanh": ad.tanh,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "none": None,
}


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype=np.float64) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape).astype(dtype)


class Layer:
    """Minimal parameter container.

    Subclasses list their own Variables in ``_params`` and their sublayers in
    ``_children``; names are joined with dots.
    """

    _params: tuple[str, ...] = ()
    _children: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = ""):
        for name in self._params:
            var = getattr(self, name)
            if var.requires_grad:
                yield prefix + name, var
        for name in self._children:
            child = getattr(self, name)
            if child is not None:
                yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Variable]:
        return [v for _, v in self.named_parameters()]


class DenseLayer(Layer):
    """``activation(x @ W + b)`` for ``x`` of shape ``[batch, in]``."""

    _params = ("W", "b")

    def __init__(self, in_dim: int, out_dim: int, activation: str = "none", rng=None, dtype=np.float64):
        if in_dim < 1 or out_dim < 1:
            raise ConfigError(f"dense dims must be positive, got {in_dim}->{out_dim}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim, self.activation = in_dim, out_dim, activation
        self.W = Variable(glorot_uniform(rng, in_dim, out_dim, (in_dim, out_dim), dtype), True, "W")
        self.b = Variable(np.zeros(out_dim, dtype=dtype), True, "b")

    def __call__(self, x) -> Variable:
        x = ad._var(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"dense layer expects [batch, {self.in_dim}], got {x.shape}")
        y = ad.add(ad.matmul(x, self.W), self.b)
        act = ACTIVATIONS[self.activation]
        return act(y) if act else y


class EmbeddingLayer(Layer):
    """Row lookup into a ``[vocab, dim]`` table whose row 0 is the OOV/pad row.

    Row 0 must be all zeros and is never updated, even when the table is
    trainable.
    """

    _params = ("table",)

    def __init__(self, table, trainable: bool = False, dtype=None):
        table = np.array(table, dtype=dtype or np.float64)
        if table.ndim != 2 or table.shape[0] < 1:
            raise ShapeError(f"embedding table must be [vocab, dim], got {table.shape}")
        if np.any(table[0] != 0):
            raise ContractError("embedding row 0 (OOV) must be all zeros")
        if not np.isfinite(table).all():
            raise ContractError("embedding table contains non-finite values")
        self.oov_row = 0
        self.trainable = trainable
        self.table = Variable(table, requires_grad=trainable, name="table")

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    def __call__(self, token_ids) -> Variable:
        return ad.gather_rows(self.table, token_ids, frozen_row=self.oov_row)


class DropoutLayer(Layer):
    """Inverted dropout: identity at inference, ``mask / (1 - rate)`` in training."""

    def __init__(self, rate: float = 0.5):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.mode = "infer"

    def __call__(self, x, rng: np.random.Generator | None = None, mode: str | None = None) -> Variable:
        mode = mode or self.mode
        if mode not in ("train", "infer"):
            raise ConfigError(f"unknown dropout mode {mode!r}")
        x = ad._var(x)
        if mode == "infer" or self.rate == 0.0:
            return x
        if rng is None:
            raise ContractError("training-mode dropout needs an explicit rng")
        keep = rng.random(x.shape) >= self.rate
        mask = keep.astype(x.dtype) / (1.0 - self.rate)
        return ad.mul(x, Variable(mask))


class Conv1DLayer(Layer):
    """Cross-correlation over time with ``filters`` output channels.

    ``padding="same_zero"`` zero-pads so the length is preserved;
    ``padding="valid"`` shrinks it by ``kernel_width - 1``.
    """

    _params = ("weights", "bias")

    def __init__(
        self,
        in_channels: int,
        filters: int = 300,
        kernel_width: int = 3,
        padding: str = "same_zero",
        activation: str = "relu",
        rng=None,
        dtype=np.float64,
    ):
        if padding not in ("same_zero", "valid"):
            raise ConfigError(f"unknown padding {padding!r}")
        if kernel_width < 1 or filters < 1 or in_channels < 1:
            raise ConfigError("conv dims must be positive")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.filters, self.kernel_width = in_channels, filters, kernel_width
        self.padding, self.activation = padding, activation
        fan_in, fan_out = kernel_width * in_channels, kernel_width * filters
        w = glorot_uniform(rng, fan_in, fan_out, (kernel_width, in_channels, filters), dtype)
        self.weights = Variable(w, True, "weights")
        self.bias = Variable(np.zeros(filters, dtype=dtype), True, "bias")

    def output_length(self, length: int) -> int:
        return length if self.padding == "same_zero" else length - self.kernel_width + 1

    def __call__(self, x) -> Variable:
        x = ad._var(x)
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ShapeError(f"conv expects [batch, length, {self.in_channels}], got {x.shape}")
        B, L, C = x.shape
        k = self.kernel_width
        if self.padding == "same_zero":
            left = (k - 1) // 2
            x = ad.pad_time(x, left, k - 1 - left)
        elif L < k:
            raise ShapeError(f"valid convolution needs length >= {k}, got {L}")
        windows = ad.unfold(x, k)
        n = windows.shape[1]
        flat = ad.reshape(windows, (B * n, k * C))
        kernel = ad.reshape(self.weights, (k * C, self.filters))
        y = ad.add(ad.matmul(flat, kernel), self.bias)
        act = ACTIVATIONS[self.activation]
        if act:
            y = act(y)
        return ad.reshape(y, (B, n, self.filters))


def maxpool1d(x, mask=None) -> Variable:
    """Global max over time, ``[B, L, C] -> [B, C]``.

    Positions where ``mask`` is false never win.  Ties go to the earliest
    position.
    """
    x = ad._var(x)
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d expects rank 3, got {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError("maxpool1d over an empty sequence")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape[:2]:
            raise ShapeError(f"mask shape {mask.shape} does not match {x.shape[:2]}")
        if not mask.any(axis=1).all():
            raise ContractError("maxpool1d: a sequence has no real positions")
        x = ad.where(mask, x, Variable(np.full(x.shape, -np.inf, dtype=x.dtype)))
    return ad.max(x, axis=1)


class LSTMCell(Layer):
    """Standard LSTM cell over the concatenated input ``[x_t; h]``.

    i = sigmoid([x; h] W_i + b_i), f = sigmoid([x; h] W_f + b_f),
    o = sigmoid([x; h] W_o + b_o), g = tanh([x; h] W_g + b_g),
    c' = f * c + i * g, h' = o * tanh(c').
    """

    _params = ("W_i", "W_f", "W_o", "W_g", "b_i", "b_f", "b_o", "b_g")
    n_gates = 4

    def __init__(self, in_dim: int, hidden: int = 64, rng=None, dtype=np.float64, init_range: float = 0.08, forget_bias: float = 1.0):
        if in_dim < 1 or hidden < 1:
            raise ConfigError("LSTM dims must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.hidden = in_dim, hidden
        shape = (in_dim + hidden, hidden)
        for gate in "ifog":
            w = rng.uniform(-init_range, init_range, size=shape).astype(dtype)
            setattr(self, f"W_{gate}", Variable(w, True, f"W_{gate}"))
        for gate in "iog":
            setattr(self, f"b_{gate}", Variable(np.zeros(hidden, dtype=dtype), True, f"b_{gate}"))
        self.b_f = Variable(np.full(hidden, forget_bias, dtype=dtype), True, "b_f")

    def zero_state(self, batch: int, dtype=np.float64):
        z = np.zeros((batch, self.hidden), dtype=dtype)
        return Variable(z), Variable(z.copy())

    def fused(self):
        """Return ``(W_x, W_h, b)`` with gates stacked along the columns."""
        W = ad.concat([self.W_i, self.W_f, self.W_o, self.W_g], axis=1)
        b = ad.concat([self.b_i, self.b_f, self.b_o, self.b_g], axis=0)
        return ad.slice_axis(W, 0, 0, self.in_dim), ad.slice_axis(W, 0, self.in_dim, self.in_dim + self.hidden), b

    def _check(self, x_t, h, c):
        batch = x_t.shape[0]
        if x_t.ndim != 2 or x_t.shape[1] != self.in_dim:
            raise ShapeError(f"LSTM input must be [batch, {self.in_dim}], got {x_t.shape}")
        for name, s in (("h", h), ("c", c)):
            if s.shape != (batch, self.hidden):
                raise ShapeError(f"LSTM state {name} must be [{batch}, {self.hidden}], got {s.shape}")

    def step(self, x_t, h, c):
        """One time step; returns ``(h', c')``."""
        x_t, h, c = ad._var(x_t), ad._var(h), ad._var(c)
        self._check(x_t, h, c)
        xh = ad.concat([x_t, h], axis=1)
        W = ad.concat([self.W_i, self.W_f, self.W_o, self.W_g], axis=1)
        b = ad.concat([self.b_i, self.b_f, self.b_o, self.b_g], axis=0)
        return self._gates(ad.add(ad.matmul(xh, W), b), c)

    def step_projected(self, xw_t, h, c, W_h):
        """Step given the precomputed input projection ``x_t W_x + b``."""
        return self._gates(ad.add(xw_t, ad.matmul(h, W_h)), c)

    def _gates(self, z, c):
        H = self.hidden
        i = ad.sigmoid(ad.slice_axis(z, 1, 0, H))
        f = ad.sigmoid(ad.slice_axis(z, 1, H, 2 * H))
        o = ad.sigmoid(ad.slice_axis(z, 1, 2 * H, 3 * H))
        g = ad.tanh(ad.slice_axis(z, 1, 3 * H, 4 * H))
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        return h_new, c_new


class GRUCell(Layer):
    """Gated recurrent unit with update and reset gates.

    z = sigmoid([x; h] W_z + b_z), r = sigmoid([x; h] W_r + b_r),
    n = tanh([x; r * h] W_n + b_n), h' = (1 - z) * n + z * h.

    The cell carries no separate memory; ``c`` is passed through untouched so
    the encoder can treat both cell kinds alike.
    """

    _params = ("W_z", "W_r", "W_n", "b_z", "b_r", "b_n")

    def __init__(self, in_dim: int, hidden: int = 64, rng=None, dtype=np.float64, init_range: float = 0.08):
        if in_dim < 1 or hidden < 1:
            raise ConfigError("GRU dims must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.hidden = in_dim, hidden
        shape = (in_dim + hidden, hidden)
        for gate in "zrn":
            w = rng.uniform(-init_range, init_range, size=shape).astype(dtype)
            setattr(self, f"W_{gate}", Variable(w, True, f"W_{gate}"))
            setattr(self, f"b_{gate}", Variable(np.zeros(hidden, dtype=dtype), True, f"b_{gate}"))

    def zero_state(self, batch: int, dtype=np.float64):
        z = np.zeros((batch, self.hidden), dtype=dtype)
        return Variable(z), Variable(z.copy())

    def step(self, x_t, h, c=None):
        x_t, h = ad._var(x_t), ad._var(h)
        if x_t.ndim != 2 or x_t.shape[1] != self.in_dim or h.shape != (x_t.shape[0], self.hidden):
            raise ShapeError(f"GRU shapes inconsistent: x {x_t.shape}, h {h.shape}")
        xh = ad.concat([x_t, h], axis=1)
        z = ad.sigmoid(ad.add(ad.matmul(xh, self.W_z), self.b_z))
        r = ad.sigmoid(ad.add(ad.matmul(xh, self.W_r), self.b_r))
        xrh = ad.concat([x_t, ad.mul(r, h)], axis=1)
        n = ad.tanh(ad.add(ad.matmul(xrh, self.W_n), self.b_n))
        ones = Variable(np.ones(h.shape, dtype=h.dtype))
        h_new = ad.add(ad.mul(ad.sub(ones, z), n), ad.mul(z, h))
        return h_new, (c if c is not None else ad._var(np.zeros_like(h.value)))


def _check_mask(x: Variable, mask) -> np.ndarray:
    if mask is None:
        return np.ones(x.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match sequence shape {x.shape[:2]}")
    return mask


def _run_direction(cell, x: Variable, mask: np.ndarray):
    """Unroll ``cell`` left to right; padded steps carry the state unchanged."""
    B, L, _ = x.shape
    h, c = cell.zero_state(B, dtype=x.dtype)
    outputs = []
    if isinstance(cell, LSTMCell):
        W_x, W_h, b = cell.fused()
        xw = ad.reshape(ad.add(ad.matmul(ad.reshape(x, (B * L, cell.in_dim)), W_x), b), (B, L, 4 * cell.hidden))
        for t in range(L):
            h_new, c_new = cell.step_projected(ad.take(xw, t, axis=1), h, c, W_h)
            h, c = _carry(mask[:, t], h_new, h), _carry(mask[:, t], c_new, c)
            outputs.append(h)
    else:
        for t in range(L):
            h_new, c_new = cell.step(ad.take(x, t, axis=1), h, c)
            h, c = _carry(mask[:, t], h_new, h), _carry(mask[:, t], c_new, c)
            outputs.append(h)
    return ad.stack(outputs, axis=1), h


def _carry(m: np.ndarray, new, old):
    if m.all():
        return new
    return ad.where(m, new, old)


def reverse_order(mask: np.ndarray) -> np.ndarray:
    """Index array reversing each row's real prefix and fixing padded slots."""
    mask = np.asarray(mask, dtype=bool)
    B, L = mask.shape
    lengths = mask.sum(axis=1)
    t = np.arange(L)[None, :]
    return np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)


def encode_sequence(cells, x, mask=None, direction: str = "forward"):
    """Run a recurrent encoder over ``x`` of shape ``[B, L, in]``.

    ``cells`` is one cell for ``direction="forward"`` or a pair
    ``(forward_cell, backward_cell)`` for ``"bidirectional"``.  Returns
    ``(outputs, final)``: per-step hidden states ``[B, L, H]`` and the
    sentence state ``[B, H]`` (the final states of both directions
    concatenated when bidirectional).  Real tokens are assumed to form a
    prefix of each row.
    """
    x = ad._var(x)
    if x.ndim != 3:
        raise ShapeError(f"encoder expects [batch, length, features], got {x.shape}")
    mask = _check_mask(x, mask)
    if direction == "forward":
        cell = cells[0] if isinstance(cells, (tuple, list)) else cells
        return _run_direction(cell, x, mask)
    if direction != "bidirectional":
        raise ConfigError(f"unknown direction {direction!r}")
    fwd_cell, bwd_cell = cells
    out_f, last_f = _run_direction(fwd_cell, x, mask)
    order = reverse_order(mask)
    out_b_rev, last_b = _run_direction(bwd_cell, ad.permute_time(x, order), mask)
    # The reversal is an involution, so the same order restores alignment.
    out_b = ad.permute_time(out_b_rev, order)
    return ad.concat([out_f, out_b], axis=2), ad.concat([last_f, last_b], axis=1)


class RecurrentEncoder(Layer):
    """Unidirectional or bidirectional wrapper around one or two cells."""

    _children = ("forward_cell", "backward_cell")

    def __init__(self, in_dim: int, hidden: int = 64, bidirectional: bool = False, cell: str = "lstm", rng=None, dtype=np.float64):
        cls = {"lstm": LSTMCell, "gru": GRUCell}.get(cell)
        if cls is None:
            raise ConfigError(f"unknown recurrent cell {cell!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.bidirectional = bidirectional
        self.forward_cell = cls(in_dim, hidden, rng=rng, dtype=dtype)
        self.backward_cell = cls(in_dim, hidden, rng=rng, dtype=dtype) if bidirectional else None
        self.output_dim = hidden * (2 if bidirectional else 1)

    def __call__(self, x, mask=None):
        if self.bidirectional:
            return encode_sequence((self.forward_cell, self.backward_cell), x, mask, "bidirectional")
        return encode_sequence(self.forward_cell, x, mask, "forward")


class AttentionPooling(Layer):
    """Word-level attention pooling over encoder states.

    For hidden states ``h_t``: ``u_t = tanh(h_t W_w + b_w)``, scores
    ``u_t . context``, weights ``alpha = softmax(scores)`` over real positions
    only (padded scores are ``-inf``), and the sentence vector is
    ``sum_t alpha_t h_t``.
    """

    _params = ("W_w", "b_w", "context")

    def __init__(self, enc_dim: int, attn_dim: int | None = None, rng=None, dtype=np.float64):
        attn_dim = attn_dim or enc_dim
        rng = rng if rng is not None else np.random.default_rng(0)
        self.enc_dim, self.attn_dim = enc_dim, attn_dim
        self.W_w = Variable(glorot_uniform(rng, enc_dim, attn_dim, (enc_dim, attn_dim), dtype), True, "W_w")
        self.b_w = Variable(np.zeros(attn_dim, dtype=dtype), True, "b_w")
        self.context = Variable(rng.uniform(-0.1, 0.1, size=attn_dim).astype(dtype), True, "context")

    def __call__(self, H, mask=None):
        """Return ``(S, alpha)`` with shapes ``[B, enc]`` and ``[B, L]``."""
        H = ad._var(H)
        if H.ndim != 3 or H.shape[2] != self.enc_dim:
            raise ShapeError(f"attention expects [batch, length, {self.enc_dim}], got {H.shape}")
        B, L, D = H.shape
        mask = _check_mask(H, mask)
        if not mask.any(axis=1).all():
            raise ContractError("attention: every position of a sentence is masked")
        u = ad.tanh(ad.add(ad.matmul(ad.reshape(H, (B * L, D)), self.W_w), self.b_w))
        ctx = ad.reshape(self.context, (self.attn_dim, 1))
        scores = ad.reshape(ad.matmul(u, ctx), (B, L))
        if not mask.all():
            scores = ad.where(mask, scores, Variable(np.full((B, L), -np.inf, dtype=H.dtype)))
        alpha = ad.softmax_rows(scores)
        return ad.weighted_sum(alpha, H), alpha
