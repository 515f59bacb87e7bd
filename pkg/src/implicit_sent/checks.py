"""Finite-difference gradient checks for every layer and architecture.

Each check builds a small 64-bit problem, reduces it to a scalar with a
fixed random projection (or the real loss for whole models) and runs
:func:`~implicit_sent.autodiff.grad_check_detail`.  Everything is seeded, so
results are reproducible run to run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckResult, Variable
from .layers import (
    AttentionPooling,
    Conv1DLayer,
    DenseLayer,
    EmbeddingLayer,
    GRUCell,
    LSTMCell,
    RecurrentEncoder,
    maxpool1d,
)
from .models import MODEL_KINDS, ModelSpec, build_model

TOLERANCE = 1e-4
MODEL_ENTRIES_PER_PARAM = 30


@dataclass
class CheckOutcome:
    name: str
    result: GradCheckResult
    seconds: float

    @property
    def passed(self) -> bool:
        return self.result.passed(TOLERANCE)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        worst = f" worst={self.result.worst_param}{list(map(int, self.result.worst_index or ()))}" if self.result.worst_param else ""
        return f"{status} {self.name:<22} max_rel_err={self.result.max_rel_error:.3e} checked={self.result.checked}{worst} ({self.seconds:.2f}s)"


def _projection(rng, shape):
    return Variable(rng.normal(size=shape))


def _project(y: Variable, w: Variable) -> Variable:
    return ad.sum(ad.mul(y, w))


def _dense(rng):
    layer = DenseLayer(5, 4, "tanh", rng=rng)
    x = Variable(rng.normal(size=(3, 5)), True, "x")
    w = _projection(rng, (3, 4))
    return lambda: _project(layer(x), w), {"x": x, **dict(layer.named_parameters())}


def _conv(padding):
    def build(rng):
        layer = Conv1DLayer(4, 5, 3, padding, "tanh", rng=rng)
        x = Variable(rng.normal(size=(2, 6, 4)), True, "x")
        w = _projection(rng, (2, layer.output_length(6), 5))
        return lambda: _project(layer(x), w), {"x": x, **dict(layer.named_parameters())}

    return build


def _maxpool(rng):
    x = Variable(rng.normal(size=(2, 5, 3)), True, "x")
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool)
    w = _projection(rng, (2, 3))
    return lambda: _project(maxpool1d(x, mask), w), {"x": x}


def _embedding(rng):
    table = rng.normal(size=(6, 4))
    table[0] = 0.0
    layer = EmbeddingLayer(table, trainable=True)
    # Row 0 is frozen by contract, so only real ids take part here.
    ids = np.array([[1, 2, 2, 3], [5, 3, 1, 4]])
    w = _projection(rng, (2, 4, 4))
    return lambda: _project(layer(ids), w), dict(layer.named_parameters())


def _lstm_unroll(rng):
    cell = LSTMCell(3, 4, rng=rng, init_range=0.5)
    xs = Variable(rng.normal(size=(5, 2, 3)), True, "x")
    w = _projection(rng, (2, 4))

    def f():
        h, c = cell.zero_state(2)
        for t in range(5):
            h, c = cell.step(ad.take(xs, t, axis=0), h, c)
        return _project(h, w)

    return f, {"x": xs, **dict(cell.named_parameters())}


def _gru_unroll(rng):
    cell = GRUCell(3, 4, rng=rng, init_range=0.5)
    xs = Variable(rng.normal(size=(5, 2, 3)), True, "x")
    w = _projection(rng, (2, 4))

    def f():
        h, c = cell.zero_state(2)
        for t in range(5):
            h, c = cell.step(ad.take(xs, t, axis=0), h, c)
        return _project(h, w)

    return f, {"x": xs, **dict(cell.named_parameters())}


def _bi_encoder(rng):
    enc = RecurrentEncoder(3, 4, bidirectional=True, rng=rng)
    x = Variable(rng.normal(size=(2, 4, 3)), True, "x")
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    w_out, w_fin = _projection(rng, (2, 4, 8)), _projection(rng, (2, 8))

    def f():
        out, fin = enc(x, mask)
        return ad.add(_project(out, w_out), _project(fin, w_fin))

    return f, {"x": x, **dict(enc.named_parameters())}


def _attention(rng):
    attn = AttentionPooling(6, 5, rng=rng)
    attn.context.value = rng.normal(size=5)
    H = Variable(rng.normal(size=(2, 4, 6)), True, "H")
    mask = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], dtype=bool)
    w = _projection(rng, (2, 6))
    return lambda: _project(attn(H, mask)[0], w), {"H": H, **dict(attn.named_parameters())}


def _softmax_ce(rng):
    from .training import cross_entropy

    logits = Variable(rng.normal(size=(4, 3)), True, "logits")
    labels = rng.integers(0, 3, size=4)
    return lambda: cross_entropy(ad.softmax_rows(logits), labels), {"logits": logits}


LAYER_CHECKS: dict[str, Callable] = {
    "dense": _dense,
    "embedding": _embedding,
    "conv1d_same_zero": _conv("same_zero"),
    "conv1d_valid": _conv("valid"),
    "maxpool1d": _maxpool,
    "softmax_cross_entropy": _softmax_ce,
    "lstm_unroll_5": _lstm_unroll,
    "gru_unroll_5": _gru_unroll,
    "bilstm_encoder": _bi_encoder,
    "attention_pool": _attention,
}


def model_check_problem(kind: str, seed: int = 0):
    """A 2-sentence, 4-token batch (one sentence padded) for ``kind``."""
    from .training import cross_entropy

    rng = np.random.default_rng(seed)
    table = np.zeros((12, 300))
    # Unit-scale-ish vectors keep gradient entries well above the
    # finite-difference noise floor (~1e-11 at h=1e-5).
    table[1:] = rng.normal(0.0, 1.5, size=(11, 300))
    model = build_model(ModelSpec(kind=kind), table, seed=seed)
    ids = np.array([[3, 1, 4, 1], [5, 9, 2, 0]])
    mask = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], dtype=bool)
    labels = np.array([0, 2])
    return (lambda: cross_entropy(model.forward(ids, mask), labels)), dict(model.named_parameters())


def run_check(name: str, seed: int = 0) -> CheckOutcome:
    start = time.perf_counter()
    if name in LAYER_CHECKS:
        f, params = LAYER_CHECKS[name](np.random.default_rng(seed))
        result = ad.grad_check_detail(f, params)
    elif name in MODEL_KINDS:
        f, params = model_check_problem(name, seed)
        result = ad.grad_check_detail(f, params, max_entries=MODEL_ENTRIES_PER_PARAM, seed=seed)
    else:
        raise KeyError(f"unknown gradient check {name!r}")
    return CheckOutcome(name, result, time.perf_counter() - start)


def run_suite(names=None, seed: int = 0) -> list[CheckOutcome]:
    names = list(names) if names else [*LAYER_CHECKS, *MODEL_KINDS]
    return [run_check(n, seed) for n in names]
