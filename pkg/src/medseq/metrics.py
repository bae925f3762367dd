"""Evaluation: per-class and macro AUC for the multi-label task, head/tail/average
accuracy for the combination task, and report artifacts (canonical JSON plus an
aligned text table).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ehr import DRUG_CLASS_NAMES, N_DRUG_CLASSES
from .models import PrevPredictor, _NeuralModel
from .preprocess import CaseSequence, Position

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "medseq-report-v1"


def auc(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """Mann-Whitney rank AUC with tie correction.

    Equals (#(pos, neg) pairs with score_pos > score_neg + 0.5 * ties) / (P * N).
    Returns None when either class is empty (undefined).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores/labels must be matching 1-D, got {s.shape} vs {y.shape}")
    n_pos = int((y == 1).sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average of ranks i+1..j+1
        i = j + 1
    rank_sum_pos = float(ranks[y == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class ClassAuc:
    name: str
    auc: Optional[float]
    n_pos: int
    n_neg: int


@dataclass
class AucReport:
    per_class: list[ClassAuc]
    macro: Optional[float]
    undefined: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class": {c.name: {"auc": c.auc, "n_pos": c.n_pos, "n_neg": c.n_neg}
                          for c in self.per_class},
            "macro_auc": self.macro,
            "undefined_classes": self.undefined,
        }


def macro_average(values: Sequence[Optional[float]]) -> Optional[float]:
    """Unweighted mean of the defined per-class values."""
    defined = [v for v in values if v is not None]
    if not defined:
        return None
    return float(np.mean(defined))


def auc_report(scores: np.ndarray, labels: np.ndarray) -> AucReport:
    """Per-class AUC over (N, 7) scores and binary labels, plus the macro mean.

    Classes without both positives and negatives are undefined; they are
    excluded from the macro average with a warning.
    """
    if scores.shape != labels.shape or scores.shape[1] != N_DRUG_CLASSES:
        raise ValueError(f"expected (N, 7) scores/labels, got {scores.shape}")
    per_class = []
    undefined = []
    for j, name in enumerate(DRUG_CLASS_NAMES):
        y = labels[:, j].astype(int)
        value = auc(scores[:, j], y)
        n_pos = int(y.sum())
        per_class.append(ClassAuc(name, value, n_pos, int(y.size - n_pos)))
        if value is None:
            undefined.append(name)
    if undefined:
        logger.warning("AUC undefined for classes without both outcomes: %s",
                       ", ".join(undefined))
    return AucReport(per_class, macro_average([c.auc for c in per_class]), undefined)


@dataclass
class AccBucket:
    hits: int = 0
    samples: int = 0

    @property
    def accuracy(self) -> Optional[float]:
        return None if self.samples == 0 else self.hits / self.samples

    def to_dict(self) -> dict:
        return {"hits": self.hits, "samples": self.samples,
                "accuracy": self.accuracy}


@dataclass
class AccReport:
    head: Optional[AccBucket]
    tail: AccBucket
    average: AccBucket
    abstained: int = 0

    def to_dict(self) -> dict:
        return {
            "head": None if self.head is None else self.head.to_dict(),
            "tail": self.tail.to_dict(),
            "average": self.average.to_dict(),
            "abstained": self.abstained,
        }


def accuracy_breakdown(predictions: Sequence[Optional[int]],
                       cases: Sequence[CaseSequence],
                       abstain_excludes_head: bool = False) -> AccReport:
    """Head/tail/average accuracy from combination-index predictions.

    ``None`` predictions are abstentions (the Prev. baseline on head cases):
    they count as misses in the average and, when ``abstain_excludes_head`` is
    set, remove the head row entirely (reported as None, the paper's "--").
    """
    if len(predictions) != len(cases):
        raise ValueError(f"{len(predictions)} predictions for {len(cases)} cases")
    head = AccBucket()
    tail = AccBucket()
    average = AccBucket()
    abstained = 0
    for pred, case in zip(predictions, cases):
        hit = pred is not None and pred == case.label_dcc
        if pred is None:
            abstained += 1
        average.samples += 1
        average.hits += hit
        if case.position == Position.HEAD:
            head.samples += 1
            head.hits += hit
        if case.position == Position.TAIL:
            tail.samples += 1
            tail.hits += hit
    report = AccReport(head, tail, average, abstained)
    if abstain_excludes_head and abstained:
        report.head = None
    return report


def predictions_dcc(model: _NeuralModel,
                    cases: Sequence[CaseSequence]) -> list[int]:
    probs = model.predict_probs(cases)
    return [int(i) for i in probs.argmax(axis=1)]


def scores_dc(model: _NeuralModel, cases: Sequence[CaseSequence]) -> np.ndarray:
    return model.predict_probs(cases)


def prev_predictions(prev: PrevPredictor, cases: Sequence[CaseSequence]
                     ) -> tuple[np.ndarray, list[Optional[int]]]:
    scores = np.zeros((len(cases), N_DRUG_CLASSES))
    combos: list[Optional[int]] = []
    for i, case in enumerate(cases):
        dc, dcc = prev.predict(case)
        scores[i] = dc
        combos.append(dcc)
    return scores, combos


@dataclass
class Report:
    """One evaluation artifact: metrics plus enough lineage to reproduce it."""

    task: str
    model_kind: str
    split: str
    n_cases: int
    metrics: dict
    lineage: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "task": self.task,
            "model": self.model_kind,
            "split": self.split,
            "n_cases": self.n_cases,
            "metrics": self.metrics,
            "lineage": self.lineage,
        }

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1).encode("utf-8")

    def text_table(self) -> str:
        lines = [f"{'Task':<14}{self.task.upper()}",
                 f"{'Model':<14}{self.model_kind}",
                 f"{'Split':<14}{self.split} ({self.n_cases} cases)", ""]
        if self.task == "dc":
            lines.append(f"{'Class':<16}{'AUC':>8}")
            for name, entry in self.metrics["per_class"].items():
                value = entry["auc"]
                lines.append(f"{name:<16}{value:>8.4f}" if value is not None
                             else f"{name:<16}{'--':>8}")
            macro = self.metrics["macro_auc"]
            lines.append(f"{'Average':<16}{macro:>8.4f}" if macro is not None
                         else f"{'Average':<16}{'--':>8}")
        else:
            lines.append(f"{'Cases':<16}{'Accuracy':>10}{'Hit/Sample':>16}")
            for row in ("head", "tail", "average"):
                entry = self.metrics[row]
                label = row.capitalize()
                if entry is None or entry["accuracy"] is None:
                    lines.append(f"{label:<16}{'--':>10}{'--':>16}")
                else:
                    ratio = f"{entry['hits']}/{entry['samples']}"
                    lines.append(f"{label:<16}{entry['accuracy']:>10.4f}{ratio:>16}")
        return "\n".join(lines) + "\n"


def evaluate(predictor, cases: Sequence[CaseSequence], task: str, split: str,
             lineage: Optional[dict] = None) -> Report:
    """Deterministic evaluation of a neural model or the Prev. baseline."""
    if not cases:
        raise ValueError(f"no cases in split {split!r}")
    is_prev = isinstance(predictor, PrevPredictor)
    if task == "dc":
        if is_prev:
            scores, _ = prev_predictions(predictor, cases)
        else:
            scores = scores_dc(predictor, cases)
        labels = np.stack([c.label_dc for c in cases])
        metrics = auc_report(scores, labels).to_dict()
    elif task == "dcc":
        if is_prev:
            _, combos = prev_predictions(predictor, cases)
            metrics = accuracy_breakdown(combos, cases,
                                         abstain_excludes_head=True).to_dict()
        else:
            metrics = accuracy_breakdown(predictions_dcc(predictor, cases),
                                         cases).to_dict()
    else:
        raise ValueError(f"unknown task {task!r}")
    kind = "prev" if is_prev else predictor.spec.kind
    return Report(task, kind, split, len(cases), metrics, lineage or {})
