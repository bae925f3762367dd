"""Domain types, code vocabularies, and ingestion of raw EHR event logs.

The event log is a CSV with the exact header ``patient_id,date,kind,code,value``.
Diagnosis codes are ICD-10-like strings that get collapsed to their 3-character
family, medication codes are one of the 7 hypoglycemia drug class names, and
measurement codes identify real-valued lab/exam channels.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import date
from enum import IntEnum
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

N_DRUG_CLASSES = 7

EVENTS_HEADER = ("patient_id", "date", "kind", "code", "value")


class DrugClass(IntEnum):
    """The 7 hypoglycemia drug classes. Ordinals are fixed and used as bit/vector positions."""

    BIGUANIDES = 0
    SULFONYLUREAS = 1
    GLINIDE = 2
    TZDS = 3
    AGIS = 4
    DPP4 = 5
    INSULIN = 6


DRUG_CLASS_NAMES = (
    "Biguanides",
    "Sulfonylureas",
    "Glinide",
    "TZDs",
    "AGIs",
    "DPP-4",
    "Insulin",
)

_DRUG_NAME_TO_ORDINAL = {name: i for i, name in enumerate(DRUG_CLASS_NAMES)}


def drug_ordinal(name: str) -> Optional[int]:
    """Ordinal of a drug class name, or None if the name is not one of the 7 classes."""
    return _DRUG_NAME_TO_ORDINAL.get(name)


def combo_from_vec(vec: Sequence[float]) -> int:
    """Pack a 7-entry multi-hot vector into a 7-bit pattern (bit i = class ordinal i)."""
    if len(vec) != N_DRUG_CLASSES:
        raise ValueError(f"expected {N_DRUG_CLASSES} entries, got {len(vec)}")
    pattern = 0
    for i, v in enumerate(vec):
        if v:
            pattern |= 1 << i
    return pattern


def vec_from_combo(pattern: int) -> np.ndarray:
    """Unpack a 7-bit pattern into a float multi-hot vector of length 7."""
    if not 0 <= pattern < 128:
        raise ValueError(f"pattern {pattern} outside 7-bit range")
    return np.array([(pattern >> i) & 1 for i in range(N_DRUG_CLASSES)], dtype=np.float64)


def combo_names(pattern: int) -> tuple[str, ...]:
    return tuple(DRUG_CLASS_NAMES[i] for i in range(N_DRUG_CLASSES) if (pattern >> i) & 1)


def combo_bitstring(pattern: int) -> str:
    """7-char '0'/'1' string, position i = class ordinal i."""
    return "".join("1" if (pattern >> i) & 1 else "0" for i in range(N_DRUG_CLASSES))


def combo_from_bitstring(s: str) -> int:
    if len(s) != N_DRUG_CLASSES or set(s) - {"0", "1"}:
        raise ValueError(f"bad combo bitstring {s!r}")
    return sum(1 << i for i, ch in enumerate(s) if ch == "1")


class EventKind(IntEnum):
    DIAGNOSIS = 0
    MEDICATION = 1
    MEASUREMENT = 2


_KIND_NAMES = {"Diagnosis": EventKind.DIAGNOSIS,
               "Medication": EventKind.MEDICATION,
               "Measurement": EventKind.MEASUREMENT}
KIND_LABELS = {v: k for k, v in _KIND_NAMES.items()}


@dataclass(frozen=True)
class EventRecord:
    """One dated clinical event. ``value`` is present exactly for Measurement events."""

    patient_id: str
    date: date
    kind: EventKind
    code: str
    value: Optional[float] = None


@dataclass(frozen=True)
class PatientTimeline:
    """All events of one patient, grouped by date with dates strictly ascending."""

    patient_id: str
    days: tuple[tuple[date, tuple[EventRecord, ...]], ...]

    def __post_init__(self) -> None:
        dates = [d for d, _ in self.days]
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise ValueError(f"dates not strictly ascending for patient {self.patient_id}")
        for _, events in self.days:
            for ev in events:
                if ev.patient_id != self.patient_id:
                    raise ValueError("event patient_id mismatch")

    def n_days(self) -> int:
        return len(self.days)

    def iter_events(self) -> Iterable[EventRecord]:
        for _, events in self.days:
            yield from events

    def medication_dates(self) -> list[date]:
        return [d for d, events in self.days
                if any(ev.kind == EventKind.MEDICATION for ev in events)]


def map_icd_3digit(code: str) -> str:
    """Collapse an ICD-style code to its 3-character family, uppercased.

    Codes shorter than 3 characters are returned unchanged (uppercased).
    Total function and idempotent.
    """
    return code[:3].upper()


class IngestError(RuntimeError):
    """Unrecoverable problem with an event file (bad header, unreadable, reject storm)."""


@dataclass
class IngestResult:
    timelines: list[PatientTimeline]
    n_rows: int = 0
    n_rejected: int = 0
    reject_reasons: Counter = field(default_factory=Counter)


def _parse_row(row: dict[str, str], line_no: int) -> EventRecord:
    pid = (row.get("patient_id") or "").strip()
    if not pid:
        raise ValueError("empty patient_id")
    try:
        day = date.fromisoformat((row.get("date") or "").strip())
    except ValueError:
        raise ValueError(f"unparseable date {row.get('date')!r}")
    kind_name = (row.get("kind") or "").strip()
    kind = _KIND_NAMES.get(kind_name)
    if kind is None:
        raise ValueError(f"unknown kind {kind_name!r}")
    code = (row.get("code") or "").strip()
    if not code:
        raise ValueError("empty code")
    raw_value = (row.get("value") or "").strip()
    if kind == EventKind.MEASUREMENT:
        try:
            value = float(raw_value)
        except ValueError:
            raise ValueError(f"non-numeric measurement value {raw_value!r}")
        if not np.isfinite(value):
            raise ValueError(f"non-finite measurement value {raw_value!r}")
    else:
        if raw_value:
            raise ValueError(f"unexpected value for {kind_name} row")
        value = None
        if kind == EventKind.MEDICATION and drug_ordinal(code) is None:
            raise ValueError(f"unknown drug class {code!r}")
    return EventRecord(pid, day, kind, code, value)


def ingest_events(path: str, max_reject_rate: float = 0.5) -> IngestResult:
    """Read an events CSV into per-patient timelines.

    Malformed rows are rejected with a diagnostic and counted; the whole file is
    rejected only when the header does not match or more than ``max_reject_rate``
    of the data rows are malformed.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read event file {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != EVENTS_HEADER:
            raise IngestError(
                f"bad header in {path}: expected {','.join(EVENTS_HEADER)}, "
                f"got {reader.fieldnames}")
        result = IngestResult(timelines=[])
        by_patient: dict[str, dict[date, list[EventRecord]]] = {}
        for line_no, row in enumerate(reader, start=2):
            result.n_rows += 1
            try:
                ev = _parse_row(row, line_no)
            except ValueError as exc:
                result.n_rejected += 1
                result.reject_reasons[str(exc)] += 1
                logger.debug("rejected row %d: %s", line_no, exc)
                continue
            by_patient.setdefault(ev.patient_id, {}).setdefault(ev.date, []).append(ev)
    if result.n_rows and result.n_rejected / result.n_rows > max_reject_rate:
        raise IngestError(
            f"{result.n_rejected}/{result.n_rows} rows rejected in {path}; "
            "refusing to continue")
    if result.n_rejected:
        logger.warning("ingest: rejected %d of %d rows (%s)", result.n_rejected,
                       result.n_rows,
                       "; ".join(f"{k} x{v}" for k, v in result.reject_reasons.most_common(3)))
    for pid in sorted(by_patient):
        days = []
        for day in sorted(by_patient[pid]):
            events = sorted(by_patient[pid][day],
                            key=lambda e: (int(e.kind), e.code,
                                           e.value if e.value is not None else 0.0))
            days.append((day, tuple(events)))
        result.timelines.append(PatientTimeline(pid, tuple(days)))
    return result


@dataclass(frozen=True)
class IcdVocab:
    """The retained 3-digit diagnosis codes, most frequent first (ties lexicographic)."""

    codes: tuple[str, ...]
    k_icd: int

    def __post_init__(self) -> None:
        if len(set(self.codes)) != len(self.codes):
            raise ValueError("duplicate codes in IcdVocab")
        if len(self.codes) > self.k_icd:
            raise ValueError("IcdVocab larger than its capacity")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.codes)})

    def __len__(self) -> int:
        return len(self.codes)

    def encode(self, code_3digit: str) -> Optional[int]:
        return self._index.get(code_3digit)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for code in self.codes:
                fh.write(code + "\n")

    @classmethod
    def load(cls, path: str, k_icd: Optional[int] = None) -> "IcdVocab":
        with open(path, encoding="utf-8") as fh:
            codes = tuple(line.strip() for line in fh if line.strip())
        return cls(codes, k_icd if k_icd is not None else max(len(codes), 1))


def build_icd_vocab(timelines: Sequence[PatientTimeline], k_icd: int = 350) -> IcdVocab:
    """Keep the ``k_icd`` most frequent 3-digit codes by patient-day visit count.

    The count of a code is the number of patient-day groups containing it (not raw
    rows). Ties break lexicographically so identical corpora give identical vocabs.
    """
    if k_icd < 1:
        raise ValueError("k_icd must be >= 1")
    counts: Counter = Counter()
    for tl in timelines:
        for _, events in tl.days:
            day_codes = {map_icd_3digit(ev.code) for ev in events
                         if ev.kind == EventKind.DIAGNOSIS}
            counts.update(day_codes)
    ranked = sorted(counts, key=lambda c: (-counts[c], c))
    if len(ranked) < k_icd:
        logger.warning("only %d distinct diagnosis codes; requested top %d",
                       len(ranked), k_icd)
    return IcdVocab(tuple(ranked[:k_icd]), k_icd)


@dataclass(frozen=True)
class MeasurementVocab:
    """Measurement channels with per-channel population statistics.

    ``sigma`` uses the population convention (divide by n). Channels that were
    never observed, or observed at a single constant value, carry sigma 0 and are
    flagged constant.
    """

    codes: tuple[str, ...]
    mu: np.ndarray
    sigma: np.ndarray
    constant: np.ndarray

    def __post_init__(self) -> None:
        if len(set(self.codes)) != len(self.codes):
            raise ValueError("duplicate measurement codes")
        n = len(self.codes)
        if not (self.mu.shape == self.sigma.shape == self.constant.shape == (n,)):
            raise ValueError("stat arrays must match channel count")
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be >= 0")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.codes)})

    def __len__(self) -> int:
        return len(self.codes)

    def encode(self, code: str) -> Optional[int]:
        return self._index.get(code)

    @classmethod
    def from_codes(cls, codes: Iterable[str]) -> "MeasurementVocab":
        ordered = tuple(codes)
        n = len(ordered)
        return cls(ordered, np.zeros(n), np.zeros(n), np.ones(n, dtype=bool))

    @classmethod
    def collect_channels(cls, timelines: Sequence[PatientTimeline]) -> "MeasurementVocab":
        """Distinct measurement codes observed in the corpus, lexicographic order."""
        codes = sorted({ev.code for tl in timelines for ev in tl.iter_events()
                        if ev.kind == EventKind.MEASUREMENT})
        return cls.from_codes(codes)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, code in enumerate(self.codes):
                fh.write(f"{code},{float(self.mu[i])!r},{float(self.sigma[i])!r}\n")

    @classmethod
    def load(cls, path: str) -> "MeasurementVocab":
        codes, mus, sigmas = [], [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                code, mu_s, sigma_s = line.rsplit(",", 2)
                codes.append(code)
                mus.append(float(mu_s))
                sigmas.append(float(sigma_s))
        mu = np.array(mus, dtype=np.float64)
        sigma = np.array(sigmas, dtype=np.float64)
        return cls(tuple(codes), mu, sigma, sigma == 0.0)


def build_measurement_stats(timelines: Sequence[PatientTimeline],
                            vocab: MeasurementVocab) -> MeasurementVocab:
    """Population mean and standard deviation per channel over all observed values.

    Only the given timelines (the training split) contribute. Values are sorted
    before accumulation so the result is independent of input row order.
    """
    values: list[list[float]] = [[] for _ in vocab.codes]
    for tl in timelines:
        for ev in tl.iter_events():
            if ev.kind != EventKind.MEASUREMENT:
                continue
            idx = vocab.encode(ev.code)
            if idx is not None:
                values[idx].append(ev.value)
    n = len(vocab)
    mu = np.zeros(n)
    sigma = np.zeros(n)
    constant = np.zeros(n, dtype=bool)
    for i, vals in enumerate(values):
        if not vals:
            constant[i] = True
            continue
        arr = np.sort(np.asarray(vals, dtype=np.float64))
        mu[i] = arr.mean()
        sigma[i] = np.sqrt(np.mean((arr - mu[i]) ** 2))
        if sigma[i] == 0.0:
            constant[i] = True
    return MeasurementVocab(vocab.codes, mu, sigma, constant)


MAX_COMBOS = 127  # 2^7 - 1 nonzero patterns


@dataclass(frozen=True)
class DrugComboVocab:
    """Distinct drug-combination patterns seen in training, first-appearance order.

    ``encode`` maps unseen patterns to distinct negative ids (-pattern - 1). Any
    negative id means "not a trainable class": models never predict one, and a
    negative label can only be hit by the Prev. baseline repeating the identical
    pattern.
    """

    patterns: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(set(self.patterns)) != len(self.patterns):
            raise ValueError("duplicate combo patterns")
        if any(p <= 0 or p > 127 for p in self.patterns):
            raise ValueError("combo patterns must be nonzero 7-bit values")
        if len(self.patterns) > MAX_COMBOS:
            raise ValueError("more than 127 combo patterns")
        object.__setattr__(self, "_index", {p: i for i, p in enumerate(self.patterns)})

    def __len__(self) -> int:
        return len(self.patterns)

    def encode(self, pattern: int) -> int:
        if pattern <= 0 or pattern > 127:
            raise ValueError(f"invalid combo pattern {pattern}")
        idx = self._index.get(pattern)
        if idx is None:
            return -pattern - 1
        return idx

    def decode(self, index: int) -> int:
        if index < 0:
            return -(index + 1)
        return self.patterns[index]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for p in self.patterns:
                fh.write(combo_bitstring(p) + "\n")

    @classmethod
    def load(cls, path: str) -> "DrugComboVocab":
        with open(path, encoding="utf-8") as fh:
            patterns = tuple(combo_from_bitstring(line.strip())
                             for line in fh if line.strip())
        return cls(patterns)


def build_combo_vocab(labels: Iterable[int]) -> DrugComboVocab:
    """Collect distinct label patterns in first-appearance order."""
    seen: dict[int, None] = {}
    for pattern in labels:
        if pattern <= 0:
            raise ValueError("zero/negative drug combination label")
        seen.setdefault(pattern, None)
    return DrugComboVocab(tuple(seen))


def is_unknown_combo(index: int) -> bool:
    return index < 0


def vocab_fingerprint(icd: IcdVocab, meas: MeasurementVocab,
                      combos: DrugComboVocab) -> dict:
    """Sizes plus a content hash; checkpoints and datasets must agree on this."""
    h = hashlib.sha256()
    h.update(b"icd\n")
    for code in icd.codes:
        h.update(code.encode("utf-8") + b"\n")
    h.update(b"meas\n")
    for i, code in enumerate(meas.codes):
        h.update(f"{code},{float(meas.mu[i])!r},{float(meas.sigma[i])!r}\n"
                 .encode("utf-8"))
    h.update(b"combo\n")
    for p in combos.patterns:
        h.update(combo_bitstring(p).encode("utf-8") + b"\n")
    return {
        "n_icd": len(icd),
        "n_meas": len(meas),
        "n_combos": len(combos),
        "sha256": h.hexdigest(),
    }
