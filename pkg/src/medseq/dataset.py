"""The prepared-dataset container: vocabularies, patient splits, aligned
patient-day features, and serialization.

Binary layout (version 1, all integers little-endian):

    magic   8 bytes  b"MEDSEQD1"
    u32     container version
    u32     header length, then that many bytes of canonical JSON (mode,
            window caps, aggregation spec, vocabularies with full-precision
            statistics, split, corpus stats, config echo, vocab fingerprint)
    u32     number of patients, then per patient (sorted by id):
        u16 id length + UTF-8 id
        u32 number of aligned days, then per day:
            u32 proleptic-Gregorian date ordinal
            u16 count of set diagnosis dims + that many u16 vocab indices
            u16 count of observed channels + (u16 channel, f64 normalized value) each
            u8  drug-class bit pattern for the day
        u32 count of indexed medication days + that many u32 day indices
        u32 count of all medication days + that many u32 day indices

A JSONL debug export mirrors the same content case by case in readable form.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from datetime import date
from typing import Optional, Sequence

import numpy as np

from .ehr import (
    DRUG_CLASS_NAMES,
    DrugComboVocab,
    IcdVocab,
    MeasurementVocab,
    N_DRUG_CLASSES,
    PatientTimeline,
    build_combo_vocab,
    build_icd_vocab,
    build_measurement_stats,
    combo_from_vec,
    combo_names,
    vocab_fingerprint,
)
from .models import ModelSpec
from .preprocess import (
    AggSpec,
    AlignedDay,
    CaseSequence,
    DatasetSplit,
    MODES,
    PatientCases,
    VisitVector,
    build_patient_steps,
    cases_from_steps,
    index_patient,
    select_cohort,
    split_by_patient,
)

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"MEDSEQD1"
DATASET_VERSION = 1


class DatasetError(RuntimeError):
    pass


@dataclass
class PreparedDataset:
    mode: str
    l_outer: int
    l_inner: int
    agg: AggSpec
    k_icd: int
    icd_vocab: IcdVocab
    meas_vocab: MeasurementVocab
    combo_vocab: DrugComboVocab
    split: DatasetSplit
    patients: dict[str, PatientCases]
    stats: dict = field(default_factory=dict)
    config_echo: dict = field(default_factory=dict)
    _steps: dict = field(default_factory=dict, repr=False)
    _cases: dict = field(default_factory=dict, repr=False)

    def fingerprint(self) -> dict:
        return vocab_fingerprint(self.icd_vocab, self.meas_vocab, self.combo_vocab)

    def patient_steps(self, pid: str):
        steps = self._steps.get(pid)
        if steps is None:
            steps = build_patient_steps(self.patients[pid], self.mode,
                                        self.l_inner, self.agg)
            self._steps[pid] = steps
        return steps

    def cases(self, split_name: str) -> list[CaseSequence]:
        """All cases of a split, ordered by patient id then medication index."""
        cached = self._cases.get(split_name)
        if cached is None:
            cached = []
            for pid in sorted(self.split.of(split_name)):
                pc = self.patients[pid]
                cached.extend(cases_from_steps(pc, self.patient_steps(pid),
                                               self.combo_vocab, self.l_outer))
            self._cases[split_name] = cached
        return cached

    def model_spec(self, kind: str, task: str, **overrides) -> ModelSpec:
        base = dict(kind=kind, task=task, mode=self.mode,
                    n_icd=len(self.icd_vocab), n_meas=len(self.meas_vocab),
                    n_combos=len(self.combo_vocab), l_outer=self.l_outer,
                    l_inner=self.l_inner)
        base.update(overrides)
        return ModelSpec(**base)

    def with_mode(self, mode: str) -> "PreparedDataset":
        """Same corpus and vocabularies under the other experiment mode."""
        if mode not in MODES:
            raise ValueError(f"bad mode {mode!r}")
        return PreparedDataset(mode, self.l_outer, self.l_inner, self.agg,
                               self.k_icd, self.icd_vocab, self.meas_vocab,
                               self.combo_vocab, self.split, self.patients,
                               dict(self.stats),
                               {**self.config_echo, "mode": mode})


def _corpus_stats(patients: dict[str, PatientCases]) -> dict:
    """Table-style corpus statistics: patient-day counts per event kind, the
    persistence counts, and the per-class prescription frequencies."""
    days_dx = days_med = days_meas = 0
    heads = stays = changes = 0
    class_counts = np.zeros(N_DRUG_CLASSES, dtype=np.int64)
    total_meds = 0
    for pid in sorted(patients):
        pc = patients[pid]
        for day in pc.days:
            days_dx += bool(day.visit.icd.any())
            days_meas += bool(day.visit.meas_mask.any())
            days_med += bool(day.drugs.any())
        prev = None
        for i in pc.med_day_idx:
            drugs = pc.days[i].drugs
            class_counts += drugs.astype(np.int64)
            total_meds += 1
            if prev is None:
                heads += 1
            elif np.array_equal(prev, drugs):
                stays += 1
            else:
                changes += 1
            prev = drugs
    return {
        "patient_days": {"diagnosis": days_dx, "medication": days_med,
                         "measurement": days_meas},
        "persistence": {"head": heads, "stay": stays, "change": changes,
                        "total": total_meds},
        "class_counts": {name: int(class_counts[i])
                         for i, name in enumerate(DRUG_CLASS_NAMES)},
        "class_ratios": {name: (int(class_counts[i]) / total_meds if total_meds else 0.0)
                         for i, name in enumerate(DRUG_CLASS_NAMES)},
    }


def prepare_dataset(timelines: Sequence[PatientTimeline], mode: str, *,
                    k_icd: int = 350, l_outer: int = 20, l_inner: int = 20,
                    agg: AggSpec = AggSpec(),
                    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                    split_seed: int = 0, min_med_len: int = 10,
                    config_echo: Optional[dict] = None) -> PreparedDataset:
    """Full preprocessing pipeline: cohort, split, train-split vocabularies,
    patient-day alignment, and case indexing."""
    if mode not in MODES:
        raise ValueError(f"bad mode {mode!r}")
    cohort = select_cohort(timelines, min_med_len)
    logger.info("cohort: %d of %d patients", len(cohort), len(timelines))
    split = split_by_patient([tl.patient_id for tl in cohort], ratios, split_seed)
    train_tls = [tl for tl in cohort if tl.patient_id in split.train]
    icd_vocab = build_icd_vocab(train_tls, k_icd)
    meas_vocab = build_measurement_stats(
        train_tls, MeasurementVocab.collect_channels(train_tls))
    patients = {tl.patient_id: index_patient(tl, icd_vocab, meas_vocab)
                for tl in cohort}
    labels = []
    for pid in sorted(split.train):
        pc = patients[pid]
        for i in pc.med_day_idx:
            labels.append(combo_from_vec(pc.days[i].drugs))
    combo_vocab = build_combo_vocab(labels)
    stats = _corpus_stats(patients)
    echo = dict(config_echo or {})
    echo.update({"mode": mode, "k_icd": k_icd, "l_outer": l_outer,
                 "l_inner": l_inner, "agg": agg.to_dict(),
                 "split_seed": split_seed, "ratios": list(ratios),
                 "min_med_len": min_med_len})
    return PreparedDataset(mode, l_outer, l_inner, agg, k_icd, icd_vocab,
                           meas_vocab, combo_vocab, split, patients, stats, echo)


def _header_dict(ds: PreparedDataset) -> dict:
    return {
        "format": "medseq-dataset",
        "version": DATASET_VERSION,
        "mode": ds.mode,
        "l_outer": ds.l_outer,
        "l_inner": ds.l_inner,
        "agg": ds.agg.to_dict(),
        "k_icd": ds.k_icd,
        "vocab": {
            "icd": list(ds.icd_vocab.codes),
            "meas": [[code, float(ds.meas_vocab.mu[i]), float(ds.meas_vocab.sigma[i])]
                     for i, code in enumerate(ds.meas_vocab.codes)],
            "combos": list(ds.combo_vocab.patterns),
        },
        "split": ds.split.to_dict(),
        "stats": ds.stats,
        "config": ds.config_echo,
        "fingerprint": ds.fingerprint(),
    }


def save_dataset(ds: PreparedDataset, path: str) -> None:
    header = json.dumps(_header_dict(ds), sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        pids = sorted(ds.patients)
        fh.write(struct.pack("<I", len(pids)))
        for pid in pids:
            pc = ds.patients[pid]
            pid_b = pid.encode("utf-8")
            fh.write(struct.pack("<H", len(pid_b)))
            fh.write(pid_b)
            fh.write(struct.pack("<I", len(pc.days)))
            for day in pc.days:
                fh.write(struct.pack("<I", day.date.toordinal()))
                icd_idx = np.flatnonzero(day.visit.icd)
                fh.write(struct.pack("<H", icd_idx.size))
                for i in icd_idx:
                    fh.write(struct.pack("<H", int(i)))
                chan_idx = np.flatnonzero(day.visit.meas_mask)
                fh.write(struct.pack("<H", chan_idx.size))
                for c in chan_idx:
                    fh.write(struct.pack("<Hd", int(c), float(day.visit.meas[c])))
                fh.write(struct.pack("<B", combo_from_vec(day.drugs)))
            for idx_list in (pc.med_day_idx, pc.all_med_day_idx):
                fh.write(struct.pack("<I", len(idx_list)))
                for i in idx_list:
                    fh.write(struct.pack("<I", i))


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DatasetError("truncated dataset file")
    return data


def load_dataset(path: str) -> PreparedDataset:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != DATASET_MAGIC:
            raise DatasetError(f"{path} is not a dataset file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != DATASET_VERSION:
            raise DatasetError(f"unsupported dataset version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
        vocab = header["vocab"]
        icd_vocab = IcdVocab(tuple(vocab["icd"]), header["k_icd"])
        meas_codes = tuple(entry[0] for entry in vocab["meas"])
        mu = np.array([entry[1] for entry in vocab["meas"]], dtype=np.float64)
        sigma = np.array([entry[2] for entry in vocab["meas"]], dtype=np.float64)
        meas_vocab = MeasurementVocab(meas_codes, mu, sigma, sigma == 0.0)
        combo_vocab = DrugComboVocab(tuple(vocab["combos"]))
        split = DatasetSplit.from_dict(header["split"])
        agg = AggSpec(**header["agg"])
        n_icd = len(icd_vocab)
        n_meas = len(meas_vocab)
        (n_patients,) = struct.unpack("<I", _read_exact(fh, 4))
        patients: dict[str, PatientCases] = {}
        for _ in range(n_patients):
            (pid_len,) = struct.unpack("<H", _read_exact(fh, 2))
            pid = _read_exact(fh, pid_len).decode("utf-8")
            (n_days,) = struct.unpack("<I", _read_exact(fh, 4))
            days = []
            for _ in range(n_days):
                (ordinal,) = struct.unpack("<I", _read_exact(fh, 4))
                icd = np.zeros(n_icd)
                (n_set,) = struct.unpack("<H", _read_exact(fh, 2))
                for _ in range(n_set):
                    (i,) = struct.unpack("<H", _read_exact(fh, 2))
                    icd[i] = 1.0
                meas = np.zeros(n_meas)
                mask = np.zeros(n_meas)
                (n_obs,) = struct.unpack("<H", _read_exact(fh, 2))
                for _ in range(n_obs):
                    c, v = struct.unpack("<Hd", _read_exact(fh, 10))
                    meas[c] = v
                    mask[c] = 1.0
                (bits,) = struct.unpack("<B", _read_exact(fh, 1))
                drugs = np.array([(bits >> i) & 1 for i in range(N_DRUG_CLASSES)],
                                 dtype=np.float64)
                days.append(AlignedDay(date.fromordinal(ordinal),
                                       VisitVector(icd, meas, mask), drugs))
            idx_lists = []
            for _ in range(2):
                (n_idx,) = struct.unpack("<I", _read_exact(fh, 4))
                idx_lists.append([struct.unpack("<I", _read_exact(fh, 4))[0]
                                  for _ in range(n_idx)])
            patients[pid] = PatientCases(pid, days, idx_lists[0], idx_lists[1])
        if fh.read(1):
            raise DatasetError("trailing bytes after dataset payload")
    ds = PreparedDataset(header["mode"], header["l_outer"], header["l_inner"],
                         agg, header["k_icd"], icd_vocab, meas_vocab, combo_vocab,
                         split, patients, header["stats"], header["config"])
    if ds.fingerprint() != header["fingerprint"]:
        raise DatasetError("vocabulary fingerprint mismatch in dataset file")
    return ds


def export_jsonl(ds: PreparedDataset, path: str,
                 splits: Sequence[str] = ("train", "validation", "test")) -> int:
    """Readable one-line-per-case mirror of the dataset; returns the line count."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for split_name in splits:
            for case in ds.cases(split_name):
                pc = ds.patients[case.patient_id]
                record = {
                    "split": split_name,
                    "patient": case.patient_id,
                    "position": case.position.value,
                    "label_classes": list(combo_names(combo_from_vec(case.label_dc))),
                    "label_dcc": case.label_dcc,
                    "outer": [],
                }
                for step in case.outer_steps:
                    days = []
                    for vv in step.inner_steps:
                        icd_codes = [ds.icd_vocab.codes[i]
                                     for i in np.flatnonzero(vv.icd)]
                        meas = {ds.meas_vocab.codes[c]: float(vv.meas[c])
                                for c in np.flatnonzero(vv.meas_mask)}
                        days.append({"icd": icd_codes, "meas": meas})
                    record["outer"].append({
                        "prev": list(combo_names(combo_from_vec(step.prev_drugs))),
                        "drugs": list(combo_names(combo_from_vec(step.drugs))),
                        "days": days,
                    })
                fh.write(json.dumps(record, sort_keys=True) + "\n")
                n += 1
    return n


def dataset_case_counts(ds: PreparedDataset) -> dict:
    return {name: len(ds.cases(name)) for name in ("train", "validation", "test")}
