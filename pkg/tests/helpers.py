"""Shared test fixtures: tiny hand-built timelines, CSV writers, random cases."""
from datetime import date

import numpy as np

from medseq.ehr import EventKind, EventRecord, PatientTimeline
from medseq.preprocess import (
    AggSpec,
    CaseSequence,
    OuterStep,
    Position,
    VisitVector,
    aggregate,
)

EVENTS_HEADER = "patient_id,date,kind,code,value\n"


def write_csv(tmp_path, rows, name="events.csv"):
    path = tmp_path / name
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(EVENTS_HEADER)
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")
    return path


def make_timeline(pid, day_specs):
    """day_specs: [(iso_date, [("dx", code) | ("med", class_name) | ("meas", code, value)])]"""
    days = []
    for iso, events in day_specs:
        day = date.fromisoformat(iso)
        records = []
        for ev in events:
            if ev[0] == "dx":
                records.append(EventRecord(pid, day, EventKind.DIAGNOSIS, ev[1]))
            elif ev[0] == "med":
                records.append(EventRecord(pid, day, EventKind.MEDICATION, ev[1]))
            elif ev[0] == "meas":
                records.append(EventRecord(pid, day, EventKind.MEASUREMENT,
                                           ev[1], float(ev[2])))
            else:
                raise ValueError(ev)
        days.append((day, tuple(records)))
    return PatientTimeline(pid, tuple(days))


def random_case(rng, n_icd, n_meas, n_outer, n_combos=5, pid="p",
                with_prev=True, max_inner=3):
    """Synthetic case with random day vectors; labels drawn from [0, n_combos)."""
    steps = []
    for j in range(n_outer):
        inner = []
        for _ in range(int(rng.integers(1, max_inner + 1))):
            icd = (rng.random(n_icd) < 0.3).astype(float)
            mask = (rng.random(n_meas) < 0.5).astype(float)
            meas = rng.normal(size=n_meas) * mask
            inner.append(VisitVector(icd, meas, mask))
        agg = aggregate(inner, AggSpec())
        prev = np.zeros(7)
        if j > 0:
            prev[rng.integers(7)] = 1.0
        if with_prev:
            agg.prev_drugs = prev
        drugs = np.zeros(7)
        drugs[rng.integers(7)] = 1.0
        steps.append(OuterStep(inner, agg, prev, drugs))
    case = CaseSequence(pid, steps, steps[-1].drugs, int(rng.integers(n_combos)),
                        Position.MID)
    return case
