"""Turn patient timelines into model-ready case sequences.

Pipeline: patient-day alignment (one feature vector per calendar day), z-score
normalization with zero imputation for missing channels, cohort filtering,
per-medication-day case construction with sandwiched observation windows, window
aggregation, and patient-level train/validation/test splitting.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .ehr import (
    DrugComboVocab,
    EventKind,
    IcdVocab,
    MeasurementVocab,
    N_DRUG_CLASSES,
    PatientTimeline,
    combo_from_vec,
    drug_ordinal,
    map_icd_3digit,
)

logger = logging.getLogger(__name__)

DIABETES_PREFIXES = ("E10", "E11", "E12", "E13", "E14")

MODE_WITH_PREV = "with_prev"
MODE_WITHOUT_PREV = "without_prev"
MODES = (MODE_WITH_PREV, MODE_WITHOUT_PREV)


class Position(str, Enum):
    HEAD = "head"
    MID = "mid"
    TAIL = "tail"


@dataclass
class VisitVector:
    """One patient-day feature vector.

    ``meas`` is normalized and zero-imputed; entries are 0 wherever ``meas_mask``
    is 0. ``prev_drugs`` is set only on aggregated vectors in with_prev mode.
    """

    icd: np.ndarray
    meas: np.ndarray
    meas_mask: np.ndarray
    prev_drugs: Optional[np.ndarray] = None
    _x: Optional[np.ndarray] = field(default=None, repr=False)

    def features(self) -> np.ndarray:
        """Concatenated [icd, meas] model input (cached)."""
        if self._x is None:
            self._x = np.concatenate([self.icd, self.meas])
        return self._x


@dataclass
class OuterStep:
    """One medication time step: the observation days sandwiched since the previous
    medication day, their aggregate, and the previously prescribed classes."""

    inner_steps: list[VisitVector]
    aggregated: VisitVector
    prev_drugs: np.ndarray
    drugs: np.ndarray


@dataclass
class CaseSequence:
    """One training/evaluation sample: predict the final outer step's prescription."""

    patient_id: str
    outer_steps: list[OuterStep]
    label_dc: np.ndarray
    label_dcc: int
    position: Position

    def __post_init__(self) -> None:
        if not self.outer_steps:
            raise ValueError("CaseSequence needs at least one outer step")
        if not self.label_dc.any():
            raise ValueError("zero label")


@dataclass(frozen=True)
class AggSpec:
    """How to collapse a window of visit vectors into one vector.

    Binary code dims support {"max", "count"}; measurement dims support
    {"mean", "max"} over observed entries only ("mean" is mask-weighted).
    """

    icd: str = "max"
    meas: str = "mean"

    def __post_init__(self) -> None:
        if self.icd not in ("max", "count"):
            raise ValueError(f"bad icd agg {self.icd!r}")
        if self.meas not in ("mean", "max"):
            raise ValueError(f"bad meas agg {self.meas!r}")

    def to_dict(self) -> dict:
        return {"icd": self.icd, "meas": self.meas}


def normalize(value: float, mu: float, sigma: float) -> float:
    """(value - mu) / sigma; constant channels (sigma == 0) normalize to 0."""
    if not np.isfinite(value):
        raise ValueError(f"non-finite measurement value {value!r}")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0.0:
        return 0.0
    return (value - mu) / sigma


def impute_missing(meas_partial: dict[str, float],
                   vocab: MeasurementVocab) -> tuple[np.ndarray, np.ndarray]:
    """Dense (values, mask) for one day from a sparse channel map.

    Observed channels are normalized; missing ones stay 0, which after
    normalization stands for the population mean.
    """
    unknown = [code for code in meas_partial if vocab.encode(code) is None]
    if unknown:
        raise KeyError(f"unknown measurement channels {sorted(unknown)}")
    values = np.zeros(len(vocab))
    mask = np.zeros(len(vocab))
    for code, raw in meas_partial.items():
        idx = vocab.encode(code)
        values[idx] = normalize(raw, vocab.mu[idx], vocab.sigma[idx])
        mask[idx] = 1.0
    return values, mask


@dataclass
class AlignedDay:
    date: date
    visit: VisitVector
    drugs: np.ndarray


def align_patient_day(timeline: PatientTimeline, icd_vocab: IcdVocab,
                      meas_vocab: MeasurementVocab) -> list[AlignedDay]:
    """Collapse all same-day events into one visit vector per day.

    Repeated diagnosis codes collapse to one bit, same-channel measurements are
    averaged (raw, before normalization), and drugs_today ORs the day's
    medication events. Codes/channels outside the vocabularies are dropped.
    """
    out: list[AlignedDay] = []
    for day, events in timeline.days:
        icd = np.zeros(len(icd_vocab))
        drugs = np.zeros(N_DRUG_CLASSES)
        per_channel: dict[str, list[float]] = {}
        for ev in events:
            if ev.kind == EventKind.DIAGNOSIS:
                idx = icd_vocab.encode(map_icd_3digit(ev.code))
                if idx is not None:
                    icd[idx] = 1.0
            elif ev.kind == EventKind.MEDICATION:
                ordinal = drug_ordinal(ev.code)
                if ordinal is not None:
                    drugs[ordinal] = 1.0
            else:
                if meas_vocab.encode(ev.code) is not None:
                    per_channel.setdefault(ev.code, []).append(ev.value)
        day_means = {code: float(np.mean(sorted(vals)))
                     for code, vals in per_channel.items()}
        meas, mask = impute_missing(day_means, meas_vocab)
        out.append(AlignedDay(day, VisitVector(icd, meas, mask), drugs))
    return out


class EmptyCohortError(RuntimeError):
    pass


def _has_diabetes_code(timeline: PatientTimeline) -> bool:
    return any(map_icd_3digit(ev.code) in DIABETES_PREFIXES
               for ev in timeline.iter_events() if ev.kind == EventKind.DIAGNOSIS)


def select_cohort(timelines: Sequence[PatientTimeline],
                  min_med_len: int = 10) -> list[PatientTimeline]:
    """Keep patients with a diabetes diagnosis (E10-E14) and strictly more than
    ``min_med_len`` medication patient-days."""
    kept = [tl for tl in timelines
            if _has_diabetes_code(tl) and len(tl.medication_dates()) > min_med_len]
    if not kept:
        raise EmptyCohortError(
            f"no patient passed the cohort criteria (>= 1 diabetes code and "
            f"> {min_med_len} medication days)")
    return kept


def aggregate(inner_steps: Sequence[VisitVector], agg: AggSpec) -> VisitVector:
    """Collapse a nonempty window of day vectors into one vector."""
    if not inner_steps:
        raise ValueError("cannot aggregate an empty window")
    icd_stack = np.stack([v.icd for v in inner_steps])
    if agg.icd == "max":
        icd = icd_stack.max(axis=0)
    else:
        icd = icd_stack.sum(axis=0)
    meas_stack = np.stack([v.meas for v in inner_steps])
    mask_stack = np.stack([v.meas_mask for v in inner_steps])
    any_mask = (mask_stack.sum(axis=0) > 0).astype(np.float64)
    if agg.meas == "mean":
        denom = np.maximum(mask_stack.sum(axis=0), 1.0)
        meas = (meas_stack * mask_stack).sum(axis=0) / denom
    else:
        big_neg = np.where(mask_stack > 0, meas_stack, -np.inf)
        meas = np.where(any_mask > 0, big_neg.max(axis=0), 0.0)
    return VisitVector(icd, meas * any_mask if agg.meas == "mean" else meas, any_mask)


@dataclass
class PatientCases:
    """Per-patient aligned days plus the indexed medication steps.

    ``med_day_idx`` lists the aligned-day indices of medication days on or after
    the first diabetes diagnosis; cases are built one per such day.
    """

    patient_id: str
    days: list[AlignedDay]
    med_day_idx: list[int]
    all_med_day_idx: list[int]


def index_patient(timeline: PatientTimeline, icd_vocab: IcdVocab,
                  meas_vocab: MeasurementVocab) -> PatientCases:
    days = align_patient_day(timeline, icd_vocab, meas_vocab)
    first_dx: Optional[date] = None
    for day, events in timeline.days:
        if any(ev.kind == EventKind.DIAGNOSIS
               and map_icd_3digit(ev.code) in DIABETES_PREFIXES for ev in events):
            first_dx = day
            break
    all_med = [i for i, d in enumerate(days) if d.drugs.any()]
    if first_dx is None:
        med = []
    else:
        med = [i for i in all_med if days[i].date >= first_dx]
    return PatientCases(timeline.patient_id, days, med, all_med)


def _window_bounds(pc: PatientCases, j: int, l_inner: int) -> tuple[int, int]:
    """Aligned-day index range [lo, hi) of medication step j's inner window."""
    hi = pc.med_day_idx[j] + 1
    lo = 0 if j == 0 else pc.med_day_idx[j - 1] + 1
    if hi - lo > l_inner:
        lo = hi - l_inner
    return lo, hi


def build_patient_steps(pc: PatientCases, mode: str, l_inner: int,
                        agg: AggSpec) -> list[OuterStep]:
    """One OuterStep per indexed medication day; shared across that patient's cases."""
    if mode not in MODES:
        raise ValueError(f"bad mode {mode!r}")
    steps: list[OuterStep] = []
    for j in range(len(pc.med_day_idx)):
        lo, hi = _window_bounds(pc, j, l_inner)
        inner = [pc.days[i].visit for i in range(lo, hi)]
        agg_vec = aggregate(inner, agg)
        prev = (pc.days[pc.med_day_idx[j - 1]].drugs.copy() if j > 0
                else np.zeros(N_DRUG_CLASSES))
        if mode == MODE_WITH_PREV:
            agg_vec.prev_drugs = prev
        steps.append(OuterStep(inner, agg_vec, prev,
                               pc.days[pc.med_day_idx[j]].drugs.copy()))
    return steps


def steps_feature_matrix(steps: Sequence[OuterStep]) -> np.ndarray:
    """(T, d_base + 7) matrix of [aggregated icd | aggregated meas | prev bits]
    rows; batch assembly slices contiguous row ranges out of it."""
    return np.stack([np.concatenate([s.aggregated.features(), s.prev_drugs])
                     for s in steps])


def cases_from_steps(pc: PatientCases, steps: list[OuterStep],
                     combo_vocab: Optional[DrugComboVocab], l_outer: int,
                     ) -> list[CaseSequence]:
    total = len(steps)
    cases = []
    matrix = steps_feature_matrix(steps) if steps else None
    for k in range(1, total + 1):
        lo = max(0, k - l_outer)
        window = steps[lo:k]
        label_dc = steps[k - 1].drugs
        pattern = combo_from_vec(label_dc)
        label_dcc = combo_vocab.encode(pattern) if combo_vocab is not None else pattern
        if k == 1:
            position = Position.HEAD
        elif k == total:
            position = Position.TAIL
        else:
            position = Position.MID
        case = CaseSequence(pc.patient_id, window, label_dc, label_dcc, position)
        case._feat_matrix = matrix
        case._feat_lo = lo
        case._feat_hi = k
        cases.append(case)
    return cases


def build_cases(timeline: PatientTimeline, icd_vocab: IcdVocab,
                meas_vocab: MeasurementVocab,
                combo_vocab: Optional[DrugComboVocab], mode: str,
                l_outer: int = 20, l_inner: int = 20,
                agg: AggSpec = AggSpec()) -> list[CaseSequence]:
    """One CaseSequence per medication day on/after the first diabetes diagnosis.

    Case k's outer steps are the last min(k, l_outer) medication steps ending at
    k; step j's inner window covers the aligned days in (date_{j-1}, date_j]
    (all days <= date_1 for the first step), truncated to the most recent
    l_inner days.
    """
    pc = index_patient(timeline, icd_vocab, meas_vocab)
    steps = build_patient_steps(pc, mode, l_inner, agg)
    return cases_from_steps(pc, steps, combo_vocab, l_outer)


def build_pending_case(timeline: PatientTimeline, icd_vocab: IcdVocab,
                       meas_vocab: MeasurementVocab, mode: str,
                       l_outer: int = 20, l_inner: int = 20,
                       agg: AggSpec = AggSpec()) -> CaseSequence:
    """Inference-time case: predict the prescription that should follow the
    history's last events.

    Context steps mirror training (one per medication day); the final, pending
    step's window holds the aligned days after the last medication day, or the
    last medication day's own window when nothing newer exists. with_prev mode
    requires at least one prior medication day.
    """
    pc = index_patient(timeline, icd_vocab, meas_vocab)
    if not pc.med_day_idx:
        pc.med_day_idx = list(pc.all_med_day_idx)
    if mode == MODE_WITH_PREV and not pc.med_day_idx:
        raise ValueError("with_prev prediction needs at least one prior "
                         "medication day in the history")
    steps = build_patient_steps(pc, mode, l_inner, agg)
    if pc.med_day_idx:
        last_med = pc.med_day_idx[-1]
        lo = last_med + 1
        if lo >= len(pc.days):
            lo, hi = _window_bounds(pc, len(pc.med_day_idx) - 1, l_inner)
        else:
            hi = len(pc.days)
            if hi - lo > l_inner:
                lo = hi - l_inner
        prev = pc.days[last_med].drugs.copy()
    else:
        if not pc.days:
            raise ValueError("empty history")
        lo, hi = max(0, len(pc.days) - l_inner), len(pc.days)
        prev = np.zeros(N_DRUG_CLASSES)
    inner = [pc.days[i].visit for i in range(lo, hi)]
    agg_vec = aggregate(inner, agg)
    if mode == MODE_WITH_PREV:
        agg_vec.prev_drugs = prev
    pending = OuterStep(inner, agg_vec, prev, np.ones(N_DRUG_CLASSES))
    window = (steps + [pending])[-(l_outer):]
    # the label fields are placeholders; prediction only reads the inputs
    return CaseSequence(timeline.patient_id, window, np.ones(N_DRUG_CLASSES), 0,
                        Position.TAIL)


@dataclass(frozen=True)
class DatasetSplit:
    train: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]
    ratios: tuple[float, float, float]
    seed: int

    def of(self, name: str) -> frozenset[str]:
        return {"train": self.train, "val": self.validation,
                "validation": self.validation, "test": self.test}[name]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "train": sorted(self.train),
            "validation": sorted(self.validation),
            "test": sorted(self.test),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(frozenset(d["train"]), frozenset(d["validation"]),
                   frozenset(d["test"]), tuple(d["ratios"]), d["seed"])


def split_by_patient(patient_ids: Iterable[str],
                     ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                     seed: int = 0) -> DatasetSplit:
    """Seeded shuffle of patient ids, then contiguous slicing at cumulative-ratio
    boundaries (floored). All cases of a patient land in that patient's split."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    ids = sorted(set(patient_ids))
    if len(ids) < 3:
        raise EmptyCohortError(f"need at least 3 patients to split, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    b1 = int(np.floor(n * ratios[0]))
    b2 = int(np.floor(n * (ratios[0] + ratios[1])))
    return DatasetSplit(frozenset(shuffled[:b1]), frozenset(shuffled[b1:b2]),
                        frozenset(shuffled[b2:]), tuple(ratios), seed)
