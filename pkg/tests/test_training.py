import math

import numpy as np
import pytest

from implicit_sent import autodiff as ad
from implicit_sent.autodiff import Variable
from implicit_sent.data import DatasetSplit, split_train_valid, vectorize
from implicit_sent.errors import ConfigError, ContractError, NumericError, TrainingError
from implicit_sent.models import ModelSpec, build_model
from implicit_sent.synthetic import order_corpus, order_vocabulary, random_embeddings, separable_corpus
from implicit_sent.training import (
    SGD,
    Adam,
    TrainConfig,
    clip_global_norm,
    cross_entropy,
    evaluate,
    fit,
    run_replicates,
    train_and_evaluate,
)


class TestCrossEntropy:
    def test_perfect(self):
        assert cross_entropy([[0.0, 1.0, 0.0]], [1]).item() == 0.0

    def test_uniform(self):
        assert cross_entropy([[1 / 3] * 3], [2]).item() == pytest.approx(math.log(3), abs=1e-12)

    def test_mean_over_batch(self):
        loss = cross_entropy([[1.0, 0.0, 0.0], [1 / 3] * 3], [0, 1]).item()
        assert round(loss, 4) == 0.5493

    def test_floor_keeps_zero_finite(self):
        assert cross_entropy([[1.0, 0.0, 0.0]], [1]).item() == pytest.approx(-math.log(1e-12))

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            cross_entropy([[0.2, 0.3, 0.5]], [3])

    def test_softmax_gradient_is_probs_minus_one_hot(self):
        rng = np.random.default_rng(0)
        z = Variable(rng.normal(size=(4, 3)), True)
        labels = np.array([0, 2, 1, 1])
        loss = cross_entropy(ad.softmax_rows(z), labels)
        ad.backward(loss)
        p = np.exp(z.value) / np.exp(z.value).sum(axis=1, keepdims=True)
        expected = (p - np.eye(3)[labels]) / 4
        np.testing.assert_allclose(z.grad, expected, atol=1e-9)


class TestOptimizers:
    def test_sgd_step(self):
        p = Variable([1.0], True)
        p.grad = np.array([2.0])
        SGD({"p": p}, lr=0.1).step()
        assert p.value[0] == pytest.approx(0.8)

    @pytest.mark.parametrize("cls", [SGD, Adam])
    def test_zero_gradient_no_change(self, cls):
        p = Variable([1.0, -2.0], True)
        cls({"p": p}).step()
        np.testing.assert_array_equal(p.value, [1.0, -2.0])

    def test_adam_first_step_is_lr(self):
        p = Variable([0.0, 0.0], True)
        p.grad = np.array([3.0, -0.01])
        Adam({"p": p}, lr=1e-3).step()
        np.testing.assert_allclose(p.value, [-1e-3, 1e-3], rtol=1e-5)

    def test_nan_gradient(self):
        p = Variable([1.0], True)
        p.grad = np.array([np.nan])
        with pytest.raises(NumericError, match="w1"):
            Adam({"w1": p}).step()

    def test_sgd_descends_quadratic(self):
        p = Variable([3.0, -1.0], True)
        opt = SGD({"p": p}, lr=0.1)
        before = float(np.sum(p.value**2))
        for _ in range(5):
            opt.zero_grad()
            ad.backward(ad.sum(ad.mul(p, p)))
            opt.step()
        assert float(np.sum(p.value**2)) < before

    def test_clip(self):
        a, b = Variable([0.0], True), Variable([0.0], True)
        a.grad, b.grad = np.array([3.0]), np.array([4.0])
        assert clip_global_norm([a, b], 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose([a.grad[0], b.grad[0]], [0.6, 0.8])

    def test_clip_below_threshold_untouched(self):
        a = Variable([0.0], True)
        a.grad = np.array([0.5])
        clip_global_norm([a], 5.0)
        assert a.grad[0] == 0.5

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="rmsprop")
        assert TrainConfig(optimizer="sgd").learning_rate == 0.1


@pytest.fixture(scope="module")
def small():
    vocab, table = order_vocabulary()
    split = split_train_valid(order_corpus(60, seed=1), seed=0, test=order_corpus(20, seed=2, prefix="t"))
    return vocab, table, split


class TestFit:
    def test_initial_loss_near_ln3(self, small):
        vocab, table, split = small
        model = build_model(ModelSpec(kind="lstm"), table, seed=0)
        ids, mask, labels = vectorize(split.train, vocab, 64)
        loss = cross_entropy(model.forward(ids, mask), labels).item()
        assert abs(loss - math.log(3)) < 0.2

    def test_one_report_per_epoch(self, small):
        vocab, table, split = small
        seen = []
        model = build_model(ModelSpec(kind="dnn"), table)
        _, reports = fit(model, split, TrainConfig(epochs=3), vocab, on_epoch=seen.append)
        assert [r.epoch for r in reports] == [1, 2, 3]
        assert seen == reports

    def test_deterministic(self, small):
        vocab, table, split = small
        states = []
        for _ in range(2):
            model = build_model(ModelSpec(kind="lstm"), table, seed=4)
            fit(model, split, TrainConfig(epochs=2, seed=4), vocab)
            states.append(model.state_dict())
        for k in states[0]:
            assert states[0][k].tobytes() == states[1][k].tobytes()

    def test_best_snapshot_restored(self, small):
        vocab, table, split = small
        model = build_model(ModelSpec(kind="dnn"), table)
        _, reports = fit(model, split, TrainConfig(epochs=4), vocab)
        best = max(r.val_macro_f1 for r in reports)
        assert evaluate(model, split.validation, vocab).macro.f1 == pytest.approx(best)

    def test_test_split_untouched(self, small):
        vocab, table, split = small
        before = split.test
        fit(build_model(ModelSpec(kind="dnn"), table), split, TrainConfig(epochs=1), vocab)
        assert split.test == before

    def test_empty_train(self, small):
        vocab, table, _ = small
        with pytest.raises(ContractError):
            fit(build_model(ModelSpec(kind="dnn"), table), DatasetSplit((), ()), TrainConfig(epochs=1), vocab)

    def test_overfits_separable(self):
        data = separable_corpus(60)
        vocab, table = random_embeddings(sorted({t for e in data for t in e.tokens}))
        model = build_model(ModelSpec(kind="dnn"), table)
        fit(model, DatasetSplit(tuple(data), ()), TrainConfig(epochs=60, batch_size=10, learning_rate=1e-2), vocab)
        assert evaluate(model, data, vocab).accuracy >= 99.0

    def test_divergence_reported(self, small):
        vocab, table, split = small
        model = build_model(ModelSpec(kind="dnn"), table)
        model.head.W.value[:] = np.nan
        with pytest.raises(TrainingError) as info:
            fit(model, split, TrainConfig(epochs=2), vocab)
        assert info.value.epoch == 1 and info.value.batch == 1


class TestReplicates:
    def test_single_replicate_equals_direct(self, small):
        vocab, table, split = small
        spec, cfg = ModelSpec(kind="dnn"), TrainConfig(epochs=2, seed=3)
        avg, reps = run_replicates(spec, split, cfg, vocab, table, n=1)
        direct = train_and_evaluate(spec, split, cfg, vocab, table, seed=3)
        assert avg.to_dict() == direct.to_dict() == reps[0].to_dict()

    def test_identical_seeds_average_to_one_run(self, small):
        vocab, table, split = small
        spec, cfg = ModelSpec(kind="dnn"), TrainConfig(epochs=2)
        avg, reps = run_replicates(spec, split, cfg, vocab, table, n=3, seeds=[7, 7, 7])
        assert avg.macro.f1 == pytest.approx(reps[0].macro.f1)

    def test_average_is_mean(self, small):
        vocab, table, split = small
        avg, reps = run_replicates(ModelSpec(kind="dnn"), split, TrainConfig(epochs=2), vocab, table, n=3)
        assert avg.macro.f1 == pytest.approx(np.mean([r.macro.f1 for r in reps]))
        assert avg.accuracy == pytest.approx(np.mean([r.accuracy for r in reps]))

    def test_seed_count_mismatch(self, small):
        vocab, table, split = small
        with pytest.raises(ContractError):
            run_replicates(ModelSpec(kind="dnn"), split, TrainConfig(epochs=1), vocab, table, n=2, seeds=[1])
