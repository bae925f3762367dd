"""AUC against exhaustive pair enumeration, accuracy breakdowns, reports."""
import json

import numpy as np
import pytest

from medseq.ehr import DRUG_CLASS_NAMES
from medseq.metrics import (
    AccBucket,
    accuracy_breakdown,
    auc,
    auc_report,
    evaluate,
    macro_average,
)
from medseq.models import ModelSpec, PrevPredictor, build_model
from medseq.preprocess import Position

from helpers import random_case


def brute_force_auc(scores, labels):
    """Direct enumeration of all (positive, negative) pairs."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        return None
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class TestAuc:
    def test_perfect_separation(self):
        assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert auc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5

    def test_six_point_one_inversion(self):
        scores = [0.9, 0.8, 0.4, 0.5, 0.3, 0.1]
        labels = [1, 1, 1, 0, 0, 0]
        assert auc(scores, labels) == pytest.approx(
            brute_force_auc(scores, labels), abs=1e-12)

    def test_matches_bruteforce_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(2, 30))
            labels = rng.integers(2, size=n)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            scores = np.round(rng.random(n), 2)  # plenty of ties
            assert auc(scores, labels) == pytest.approx(
                brute_force_auc(scores, labels), abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=40)
        labels = rng.integers(2, size=40)
        labels[0], labels[1] = 0, 1
        base = auc(scores, labels)
        assert auc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
        assert auc(3 * scores + 7, labels) == pytest.approx(base, abs=1e-12)

    def test_degenerate_returns_none(self):
        assert auc([0.1, 0.9], [1, 1]) is None
        assert auc([0.1, 0.9], [0, 0]) is None

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            auc([0.1], [1, 0])


class TestAucReport:
    def test_oracle_scores_per_class(self):
        rng = np.random.default_rng(2)
        labels = (rng.random((50, 7)) < 0.4).astype(float)
        labels[0] = 1.0
        labels[1] = 0.0
        report = auc_report(labels.copy(), labels)
        for entry in report.per_class:
            assert entry.auc == 1.0
        assert report.macro == 1.0

    def test_undefined_class_excluded_with_warning(self, caplog):
        rng = np.random.default_rng(3)
        scores = rng.random((20, 7))
        labels = (rng.random((20, 7)) < 0.5).astype(float)
        labels[:, 5] = 0.0  # DPP-4-like empty class
        labels[0, 0] = 1.0
        labels[1, 0] = 0.0
        with caplog.at_level("WARNING"):
            report = auc_report(scores, labels)
        assert report.undefined == [DRUG_CLASS_NAMES[5]]
        assert report.per_class[5].auc is None
        defined = [c.auc for c in report.per_class if c.auc is not None]
        assert report.macro == pytest.approx(np.mean(defined))
        assert "undefined" in caplog.text.lower()

    def test_paper_macro_average_reproduction(self):
        column = [0.9259, 0.9433, 0.9339, 0.9229, 0.9133, 0.9051, 0.9435]
        assert macro_average(column) == pytest.approx(0.9268, abs=1e-4)


def case_with(label_dcc, position, prev_bits=None):
    rng = np.random.default_rng(abs(label_dcc) + 1)
    case = random_case(rng, 3, 2, 1)
    case.label_dcc = label_dcc
    case.position = position
    if prev_bits is not None:
        case.outer_steps[-1].prev_drugs = np.asarray(prev_bits, dtype=float)
    return case


class TestAccuracyBreakdown:
    def test_all_correct(self):
        cases = [case_with(0, Position.HEAD), case_with(1, Position.MID),
                 case_with(2, Position.TAIL)]
        report = accuracy_breakdown([0, 1, 2], cases)
        assert report.head.accuracy == 1.0
        assert report.tail.accuracy == 1.0
        assert report.average.accuracy == 1.0

    def test_partition_exactness(self):
        rng = np.random.default_rng(4)
        cases = []
        preds = []
        for i in range(60):
            pos = [Position.HEAD, Position.MID, Position.TAIL][i % 3]
            cases.append(case_with(i % 5, pos))
            preds.append(int(rng.integers(5)))
        report = accuracy_breakdown(preds, cases)
        head_hits = sum(p == c.label_dcc for p, c in zip(preds, cases)
                        if c.position == Position.HEAD)
        non_head_hits = sum(p == c.label_dcc for p, c in zip(preds, cases)
                            if c.position != Position.HEAD)
        assert report.head.hits == head_hits
        assert report.average.hits == head_hits + non_head_hits
        assert report.average.samples == 60

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            accuracy_breakdown([1], [])

    def test_prev_table2_scaled_reproduction(self):
        """Persistence-table arithmetic at 1:1000 scale: 22 first prescriptions,
        198 changed, 401 unchanged; average accuracy must land on 0.6456."""
        cases = []
        preds = []
        for i in range(22):
            cases.append(case_with(0, Position.HEAD))
            preds.append(None)  # Prev. abstains on heads
        for i in range(198):
            cases.append(case_with(1, Position.MID))
            preds.append(2)  # changed: prediction misses
        for i in range(401):
            cases.append(case_with(3, Position.MID))
            preds.append(3)  # unchanged: prediction hits
        report = accuracy_breakdown(preds, cases, abstain_excludes_head=True)
        assert report.head is None  # the paper prints "--" here
        assert report.average.samples == 621
        assert report.average.accuracy == pytest.approx(0.6456, abs=0.002)

    def test_accuracy_property(self):
        bucket = AccBucket(hits=3, samples=8)
        assert bucket.accuracy == 3 / 8
        assert AccBucket().accuracy is None


class TestEvaluate:
    def spec(self, task="dcc"):
        return ModelSpec("rnn", task, "with_prev", 6, 4, 5, hidden=8, seed=0)

    def cases(self, n=60):
        rng = np.random.default_rng(5)
        cases = []
        for i in range(n):
            case = random_case(rng, 6, 4, int(rng.integers(1, 4)), pid=f"p{i}")
            case.label_dcc = int(rng.integers(5))
            case.position = [Position.HEAD, Position.MID, Position.TAIL][i % 3]
            cases.append(case)
        return cases

    def test_untrained_dcc_near_chance(self):
        model = build_model(self.spec())
        for p in model.params():
            p.value[...] = 0.0
        report = evaluate(model, self.cases(200), "dcc", "test")
        # argmax of a uniform head is class 0; chance level given balanced labels
        assert report.metrics["average"]["accuracy"] == pytest.approx(0.2, abs=0.08)

    def test_byte_identical_json(self):
        model = build_model(self.spec())
        cases = self.cases()
        a = evaluate(model, cases, "dcc", "test").to_json_bytes()
        b = evaluate(model, cases, "dcc", "test").to_json_bytes()
        assert a == b

    def test_dc_report_shape(self):
        model = build_model(self.spec("dc"))
        report = evaluate(model, self.cases(), "dc", "test")
        assert set(report.metrics["per_class"]) == set(DRUG_CLASS_NAMES)
        table = report.text_table()
        assert "Average" in table
        for name in DRUG_CLASS_NAMES:
            assert name in table

    def test_dcc_table_shape(self):
        model = build_model(self.spec())
        table = evaluate(model, self.cases(), "dcc", "test").text_table()
        for row in ("Head", "Tail", "Average"):
            assert row in table

    def test_prev_eval_tables(self):
        from medseq.ehr import DrugComboVocab

        vocab = DrugComboVocab(tuple(1 << i for i in range(5)))
        cases = self.cases()
        for case in cases:
            if case.position == Position.HEAD:
                case.outer_steps[-1].prev_drugs = np.zeros(7)
        prev = PrevPredictor(vocab)
        report = evaluate(prev, cases, "dcc", "test")
        assert report.metrics["head"] is None
        assert report.metrics["abstained"] > 0
        table = report.text_table()
        assert "--" in table

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError):
            evaluate(build_model(self.spec()), [], "dcc", "test")


def test_report_json_schema():
    model = build_model(ModelSpec("lr", "dcc", "with_prev", 6, 4, 5, seed=0))
    rng = np.random.default_rng(6)
    cases = [random_case(rng, 6, 4, 2, pid=f"p{i}") for i in range(10)]
    report = evaluate(model, cases, "dcc", "test", lineage={"dataset": "x.mds"})
    payload = json.loads(report.to_json_bytes())
    assert payload["schema"] == "medseq-report-v1"
    assert payload["model"] == "lr"
    assert payload["lineage"]["dataset"] == "x.mds"
    assert payload["n_cases"] == 10
