"""Loss, optimizers, the epoch loop and replicate averaging."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .data import DatasetSplit, Example, Vocabulary, vectorize
from .errors import ConfigError, ContractError, NumericError, TrainingError
from .metrics import EvalReport, average_reports
from .models import RECURRENT_KINDS, ClassifierModel, ModelSpec, build_model

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def cross_entropy(probs, labels) -> Variable:
    """Mean negative log-probability of the true class, floored at 1e-12."""
    probs = ad._var(probs)
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ContractError(f"labels must lie in [0, {probs.shape[1]})")
    picked = ad.pick(probs, labels)
    return ad.scale(ad.mean(ad.log(picked, floor=PROB_FLOOR)), -1.0)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    optimizer: str = "adam"
    learning_rate: float | None = None
    seed: int = 0
    replicates: int = 3
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate is None:
            self.learning_rate = 1e-3 if self.optimizer == "adam" else 1e-1
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_macro_f1: float
    val_accuracy: float

    def to_record(self) -> dict:
        return {"epoch": self.epoch, "loss": self.train_loss, "val_macro_f1": self.val_macro_f1, "val_accuracy": self.val_accuracy}


class SGD:
    def __init__(self, params: dict[str, Variable], lr: float = 0.1):
        self.params = dict(params)
        self.lr = lr
        self.t = 0

    def _grads(self):
        grads = {}
        for name, p in self.params.items():
            g = p.grad
            if np.isnan(g).any():
                raise NumericError(f"NaN gradient in parameter {name}")
            grads[name] = g
        return grads

    def step(self) -> None:
        grads = self._grads()
        self.t += 1
        for name, p in self.params.items():
            p.value = p.value - self.lr * grads[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


class Adam(SGD):
    """Bias-corrected Adam with the usual beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.betas = betas
        self.eps = eps
        self.m = {n: np.zeros_like(p.value) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in self.params.items()}

    def step(self) -> None:
        grads = self._grads()
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, params, lr: float):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return SGD(params, lr)
    raise ConfigError(f"unknown optimizer {name!r}")


def clip_global_norm(params: Sequence[Variable], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(float(np.sum([np.sum(p.grad * p.grad) for p in params])))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad = p.grad * factor
    return norm


def _batches(n: int, batch_size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


def _trim(ids: np.ndarray, mask: np.ndarray):
    # Columns past the longest real sentence are pure padding.
    width = max(int(mask.sum(axis=1).max()), 1)
    return ids[:, :width], mask[:, :width]


def predict_arrays(model: ClassifierModel, ids, mask, batch_size: int = 256) -> np.ndarray:
    preds = []
    for b in _batches(len(ids), batch_size):
        bi, bm = _trim(ids[b], mask[b])
        preds.append(model.predict(bi, bm))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: ClassifierModel, examples: Sequence[Example], vocab: Vocabulary, batch_size: int = 256) -> EvalReport:
    ids, mask, labels = vectorize(examples, vocab, model.spec.max_len)
    return EvalReport.from_labels(labels, predict_arrays(model, ids, mask, batch_size))


def fit(
    model: ClassifierModel,
    split: DatasetSplit,
    config: TrainConfig,
    vocab: Vocabulary,
    on_epoch: Callable[[EpochReport], None] | None = None,
) -> tuple[ClassifierModel, list[EpochReport]]:
    """Train with shuffled mini-batches and keep the best-validation snapshot.

    After each epoch the model is scored on ``split.validation`` (or on the
    training set when the validation set is empty); the parameters with the
    highest validation macro-F1 are restored at the end, earliest epoch
    winning ties.
    """
    if not split.train:
        raise ContractError("training set is empty")
    max_len = model.spec.max_len
    ids, mask, labels = vectorize(split.train, vocab, max_len)
    val_examples = split.validation or split.train
    v_ids, v_mask, v_labels = vectorize(val_examples, vocab, max_len)

    params = dict(model.named_parameters())
    optimizer = make_optimizer(config.optimizer, params, config.learning_rate)
    clip = config.clip_norm if model.spec.kind in RECURRENT_KINDS else None
    shuffle_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])

    reports: list[EpochReport] = []
    best_f1, best_state = -1.0, None
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(ids))
        losses = []
        for bno, b in enumerate(_batches(len(ids), config.batch_size, order), start=1):
            bi, bm = _trim(ids[b], mask[b])
            optimizer.zero_grad()
            with ad.Tape() as tape:
                try:
                    probs = model.forward(bi, bm, mode="train", rng=dropout_rng)
                except NumericError as exc:
                    raise TrainingError(str(exc), epoch=epoch, batch=bno) from exc
                loss = cross_entropy(probs, labels[b])
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError("training loss is not finite", epoch=epoch, batch=bno)
                tape.backward(loss)
            try:
                if clip is not None:
                    clip_global_norm(list(params.values()), clip)
                optimizer.step()
            except NumericError as exc:
                raise TrainingError(str(exc), epoch=epoch, batch=bno) from exc
            losses.append(value * len(b))
        preds = predict_arrays(model, v_ids, v_mask)
        val = EvalReport.from_labels(v_labels, preds)
        report = EpochReport(epoch, float(np.sum(losses) / len(ids)), val.macro.f1, val.accuracy)
        reports.append(report)
        log.debug("epoch %d loss %.4f val_macro_f1 %.2f", epoch, report.train_loss, report.val_macro_f1)
        if on_epoch is not None:
            on_epoch(report)
        if report.val_macro_f1 > best_f1:
            best_f1, best_state = report.val_macro_f1, model.state_dict()
    model.load_state_dict(best_state)
    return model, reports


def run_replicates(
    spec: ModelSpec,
    split: DatasetSplit,
    config: TrainConfig,
    vocab: Vocabulary,
    embedding_table,
    n: int | None = None,
    seeds: Sequence[int] | None = None,
    on_epoch: Callable[[int, EpochReport], None] | None = None,
) -> tuple[EvalReport, list[EvalReport]]:
    """Train ``n`` replicates with seeds ``seed, seed + 1, ...`` and average.

    Returns ``(averaged_report, per_replicate_reports)``.  A failing replicate
    raises :class:`TrainingError` whose ``partial`` holds the finished reports.
    """
    n = config.replicates if n is None else n
    if n < 1:
        raise ContractError("need at least one replicate")
    seeds = list(seeds) if seeds is not None else [config.seed + i for i in range(n)]
    if len(seeds) != n:
        raise ContractError("one seed per replicate")
    done: list[EvalReport] = []
    for seed in seeds:
        callback = (lambda r, s=seed: on_epoch(s, r)) if on_epoch else None
        try:
            done.append(train_and_evaluate(spec, split, config, vocab, embedding_table, seed, on_epoch=callback))
        except TrainingError as exc:
            err = TrainingError(f"replicate seed {seed}: {exc}", partial=done)
            err.epoch, err.batch = exc.epoch, exc.batch
            raise err from exc
    return average_reports(done), done


def train_and_evaluate(
    spec: ModelSpec,
    split: DatasetSplit,
    config: TrainConfig,
    vocab: Vocabulary,
    embedding_table,
    seed: int,
    on_epoch: Callable[[EpochReport], None] | None = None,
) -> EvalReport:
    """One replicate: build with ``seed``, fit, score on the test split.

    Falls back to the validation split when no test examples are present.
    """
    cfg = TrainConfig(**{**config.to_dict(), "seed": seed})
    model = build_model(spec, embedding_table, seed=seed)
    fit(model, split, cfg, vocab, on_epoch=on_epoch)
    return evaluate(model, split.test or split.validation, vocab)
