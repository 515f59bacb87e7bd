import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_sent.errors import ContractError
from implicit_sent.metrics import (
    ConfusionMatrix,
    EvalReport,
    Scores,
    average_reports,
    class_metrics,
    format_table,
    macro_average,
    reports_to_json,
)


def brute_force(true, pred):
    """Per-class (P, R, F1) percentages by counting pairs directly."""
    out = []
    for c in range(3):
        tp = sum(1 for t, p in zip(true, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(true, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(true, pred) if t == c and p != c)
        prec = 100 * tp / (tp + fp) if tp + fp else 0.0
        rec = 100 * tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out.append((prec, rec, f1))
    return out


class TestHandCases:
    TRUE = [0, 0, 1, 1, 2, 2]
    PRED = [0, 1, 1, 1, 2, 0]

    def test_confusion(self):
        cm = ConfusionMatrix.from_labels(self.TRUE, self.PRED)
        np.testing.assert_array_equal(cm.counts, [[1, 1, 0], [0, 2, 0], [1, 0, 1]])

    def test_per_class(self):
        rep = EvalReport.from_labels(self.TRUE, self.PRED)
        assert rep.per_class["neutral"].as_tuple() == pytest.approx((50.0, 50.0, 50.0))
        assert rep.per_class["positive"].as_tuple() == pytest.approx((200 / 3, 100.0, 80.0))
        assert rep.per_class["negative"].as_tuple() == pytest.approx((100.0, 50.0, 200 / 3))
        assert rep.macro.f1 == pytest.approx((50 + 80 + 200 / 3) / 3)
        assert rep.accuracy == pytest.approx(400 / 6)

    def test_perfect(self):
        rep = EvalReport.from_labels([0, 1, 2, 2], [0, 1, 2, 2])
        assert rep.macro.as_tuple() == (100.0, 100.0, 100.0)
        assert rep.degenerate == []

    def test_degenerate_class_scores_zero(self):
        rep = EvalReport.from_labels([0, 0, 1], [0, 0, 1])
        assert rep.per_class["negative"].as_tuple() == (0.0, 0.0, 0.0)
        assert rep.degenerate == ["negative"]

    def test_macro_is_plain_mean(self):
        cm = ConfusionMatrix()
        rep = EvalReport.from_confusion(cm)
        rep.per_class = {k: Scores(0, 0, f) for k, f in zip(rep.per_class, (84.64, 59.57, 71.74))}
        assert round(macro_average(rep)[2], 2) == 71.98

    def test_macro_f1_is_not_f1_of_macro_pr(self):
        rep = EvalReport.from_labels([0, 0, 1, 1, 2, 2], [0, 1, 1, 1, 2, 0])
        p, r = rep.macro.precision, rep.macro.recall
        assert rep.macro.f1 != pytest.approx(2 * p * r / (p + r))


class TestConfusion:
    def test_accumulate(self):
        cm = ConfusionMatrix().accumulate(2, 1).accumulate(2, 1)
        assert cm.counts[2, 1] == 2 and cm.total == 2

    def test_bad_label(self):
        with pytest.raises(ContractError):
            ConfusionMatrix().accumulate(3, 0)
        with pytest.raises(ContractError):
            ConfusionMatrix.from_labels([0, 1], [0])

    def test_merge(self):
        a = ConfusionMatrix.from_labels([0, 1], [0, 2])
        b = ConfusionMatrix.from_labels([2], [2])
        assert a + b == ConfusionMatrix.from_labels([0, 1, 2], [0, 2, 2])

    def test_empty_accuracy(self):
        assert ConfusionMatrix().accuracy() == 0.0


labels = st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=200)


class TestProperties:
    @settings(max_examples=200, deadline=None)
    @given(labels)
    def test_matches_brute_force(self, pairs):
        true, pred = zip(*pairs)
        cm = ConfusionMatrix.from_labels(true, pred)
        for c, expected in enumerate(brute_force(true, pred)):
            assert class_metrics(cm, c) == pytest.approx(expected, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(labels)
    def test_bounds_and_accuracy(self, pairs):
        true, pred = zip(*pairs)
        rep = EvalReport.from_labels(true, pred)
        for s in [*rep.per_class.values(), rep.macro]:
            assert all(0.0 <= v <= 100.0 for v in s.as_tuple())
        assert rep.accuracy == pytest.approx(100 * sum(t == p for t, p in pairs) / len(pairs))

    @settings(max_examples=100, deadline=None)
    @given(labels, st.randoms(use_true_random=False))
    def test_order_invariant(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        a = EvalReport.from_labels(*zip(*pairs))
        b = EvalReport.from_labels(*zip(*shuffled))
        assert a.to_dict() == b.to_dict()

    @settings(max_examples=50, deadline=None)
    @given(labels, labels)
    def test_merge_equals_concatenation(self, p1, p2):
        a = ConfusionMatrix.from_labels(*zip(*p1))
        b = ConfusionMatrix.from_labels(*zip(*p2))
        assert a + b == ConfusionMatrix.from_labels(*zip(*(p1 + p2)))


class TestAveraging:
    def test_mean_of_reports(self):
        r1 = EvalReport.from_labels([0, 1, 2], [0, 1, 2])
        r2 = EvalReport.from_labels([0, 1, 2], [1, 1, 2])
        avg = average_reports([r1, r2])
        assert avg.macro.f1 == pytest.approx((r1.macro.f1 + r2.macro.f1) / 2)
        assert avg.per_class["neutral"].recall == pytest.approx(50.0)
        assert avg.confusion.total == 6

    def test_single_report_unchanged(self):
        r = EvalReport.from_labels([0, 1, 2, 0], [0, 2, 2, 1])
        assert average_reports([r]).to_dict() == r.to_dict()

    def test_empty(self):
        with pytest.raises(ContractError):
            average_reports([])


class TestRendering:
    def test_table_layout(self):
        rep = EvalReport.from_labels([0, 1, 2], [0, 1, 2])
        text = format_table({"lstm": rep, "bilstm": rep})
        lines = text.splitlines()
        assert "Macro" in lines[0]
        assert len(lines) == 2 + 6
        assert lines[2].startswith("LSTM") and "100.00" in lines[2]
        assert any(line.startswith("Bi-LSTM") for line in lines)

    def test_json(self):
        rep = EvalReport.from_labels([0, 1, 2], [0, 0, 2])
        data = json.loads(reports_to_json({"dnn": rep}))
        assert data["dnn"]["confusion"] == [[1, 0, 0], [1, 0, 0], [0, 0, 1]]
        assert data["dnn"]["per_class"]["neutral"]["P"] == 50.0
