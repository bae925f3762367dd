"""Seeded generator of longitudinal EHR event logs with planted, learnable
prescription dynamics.

Each patient carries a latent mean-reverting severity process sampled at visit
days. Severity is observable through (a) coarse severity-band diagnosis codes
emitted most days and (b) sparse real-valued measurement channels that read out
severity with noise, on top of a long tail of uninformative codes. Prescriptions
follow an escalation ladder of drug combinations keyed to windowed severity:
with a trend-modulated persistence probability the previous combination is
repeated, otherwise a deterministic threshold rule picks the ladder tier for the
current window. The change hazard depends on the severity trend ACROSS windows,
so sequence models have signal that a final-window-only classifier cannot see,
while the marginal stay rate stays exactly at the configured persistence
probability (the trend is symmetric around zero).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import date, timedelta
from statistics import NormalDist
from typing import Optional, Sequence

import numpy as np

from .ehr import DRUG_CLASS_NAMES, combo_names, drug_ordinal

logger = logging.getLogger(__name__)

# Escalation ladder: (combo members, stationary probability of the tier).
# Tier order is ascending severity. The implied per-class marginals are exactly
# the published prescription-class ratios this generator mimics:
# Biguanides .2286, Sulfonylureas .1434, Glinide .1406, TZDs .0327, AGIs .2642,
# DPP-4 .0015, Insulin .4868 (mean combination size 1.2978).
LADDER: tuple[tuple[tuple[str, ...], float], ...] = (
    (("AGIs",), 0.1356),
    (("Biguanides",), 0.1100),
    (("Glinide",), 0.1056),
    (("Sulfonylureas",), 0.0707),
    (("Biguanides", "AGIs"), 0.0586),
    (("Sulfonylureas", "TZDs"), 0.0327),
    (("Insulin",), 0.2803),
    (("Insulin", "Glinide"), 0.0350),
    (("Insulin", "Sulfonylureas"), 0.0400),
    (("Insulin", "AGIs"), 0.0700),
    (("Insulin", "Biguanides"), 0.0600),
    (("Insulin", "DPP-4"), 0.0015),
)

N_BANDS = 10  # severity quantization for diagnosis marker codes ("Z00".."Z09")

DX_FAMILIES = ("E10", "E11", "E12", "E13", "E14")
DX_WEIGHTS = (0.10, 0.60, 0.05, 0.05, 0.20)


def combo_mask(names: Sequence[str]) -> int:
    mask = 0
    for name in names:
        ordinal = drug_ordinal(name)
        if ordinal is None:
            raise ValueError(f"unknown drug class {name!r}")
        mask |= 1 << ordinal
    return mask


LADDER_MASKS = tuple(combo_mask(names) for names, _ in LADDER)
LADDER_PROBS = tuple(p for _, p in LADDER)


def ladder_class_prior() -> dict[str, float]:
    prior = {name: 0.0 for name in DRUG_CLASS_NAMES}
    for (names, p) in LADDER:
        for name in names:
            prior[name] += p
    return prior


@dataclass
class GenConfig:
    """Knobs of the synthetic world. Defaults mirror the published cohort shape:
    visits every 2-4 weeks, scarce measurements, persistence probability 0.645."""

    n_patients: int = 100
    seed: int = 0
    start_date: date = date(2012, 1, 6)
    start_jitter_days: int = 365
    med_gap_days: tuple[int, int] = (14, 28)
    obs_days_between: tuple[int, int] = (1, 4)
    lead_in_days: tuple[int, int] = (2, 4)
    med_days_range: tuple[int, int] = (12, 20)
    ineligible_med_days: tuple[int, int] = (3, 8)
    p_eligible: float = 1.0
    p_meas: float = 0.13          # day-level chance that any channel is measured
    q_channel: float = 0.5        # per-channel chance on a measurement day
    n_channels: int = 12
    meas_noise: float = 0.3
    n_noise_codes: int = 80
    noise_codes_per_day: tuple[int, int] = (1, 3)
    zipf_exponent: float = 1.1
    p_band_code: float = 0.9      # chance the day's severity band code is emitted
    p_adjacent_band: float = 0.2  # extra noisy marker from a neighboring band
    p_dx_recode: float = 0.05
    p_stay: float = 0.645
    stay_swing: float = 0.30      # +- applied to p_stay by trend direction
    severity_rho: float = 0.90
    severity_step: float = 0.55

    @property
    def severity_sd(self) -> float:
        return self.severity_step / np.sqrt(1.0 - self.severity_rho ** 2)

    @property
    def window_mean_sd(self) -> float:
        # within-window day correlation shrinks a window mean's spread;
        # factor measured empirically for the default visit cadence
        return 0.936 * self.severity_sd

    @property
    def pair_mean_sd(self) -> float:
        # spread of (current + previous window mean) / 2; the midpoint is
        # uncorrelated with the trend, so tier draws at change events follow
        # this distribution unconditionally
        return 0.882 * self.severity_sd

    @property
    def stay_swing_effective(self) -> float:
        return min(self.stay_swing, self.p_stay, 1.0 - self.p_stay)

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        for name in ("p_eligible", "p_meas", "q_channel", "p_stay",
                     "p_band_code", "p_adjacent_band", "p_dx_recode"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.med_days_range[0] <= 10:
            raise ValueError("eligible patients need more than 10 medication days")
        if self.ineligible_med_days[1] > 10:
            raise ValueError("ineligible patients may have at most 10 medication days")
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")

    def to_dict(self) -> dict:
        d = {}
        for k, v in self.__dict__.items():
            if isinstance(v, date):
                d[k] = v.isoformat()
            elif isinstance(v, tuple):
                d[k] = list(v)
            else:
                d[k] = v
        return d


def _ladder_thresholds(sd: float) -> list[float]:
    dist = NormalDist(0.0, sd)
    cum = np.cumsum(LADDER_PROBS)[:-1]
    return [dist.inv_cdf(float(c)) for c in cum]


def _band_thresholds(cfg: GenConfig) -> list[float]:
    dist = NormalDist(0.0, cfg.severity_sd)
    return [dist.inv_cdf(k / N_BANDS) for k in range(1, N_BANDS)]


def _bucket(value: float, thresholds: Sequence[float]) -> int:
    lo, hi = 0, len(thresholds)
    while lo < hi:
        mid = (lo + hi) // 2
        if value > thresholds[mid]:
            lo = mid + 1
        else:
            hi = mid
    return lo


def _noise_code_pool(cfg: GenConfig, rng: np.random.Generator) -> list[str]:
    """Distinct 3-character code families for the uninformative long tail."""
    pool = []
    seen = set(DX_FAMILIES) | {f"Z0{i}" for i in range(N_BANDS)}
    letters = "ABCDFGHIJKLMNOPQRSTUVWXY"  # E reserved for diabetes codes
    while len(pool) < cfg.n_noise_codes:
        fam = f"{letters[rng.integers(len(letters))]}{rng.integers(100):02d}"
        if fam not in seen:
            seen.add(fam)
            pool.append(fam)
    return pool


@dataclass
class PatientTruth:
    patient_id: str
    eligible: bool
    reason: str                     # eligible | short | nodx
    dates: list[str]
    severities: list[float]
    med_day_indices: list[int]
    window_means: list[float]
    taus: list[Optional[float]]
    p_stays: list[Optional[float]]
    stays: list[Optional[bool]]
    rule_targets: list[int]
    prescriptions: list[int]
    rows_by_kind: dict[str, int]
    days_by_kind: dict[str, int]

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class GenTruth:
    """Replayable ground truth: the oracle for every generator-derived test."""

    config: dict
    planted_combos: list[int]
    class_prior: dict[str, float]
    tier_probs: list[float]
    n_patients: int
    n_eligible: int
    totals_rows: dict[str, int]
    totals_days: dict[str, int]
    icd_day_counts: dict[str, int]
    stay_cases: int
    change_cases: int
    head_cases: int
    patients: list[PatientTruth] = field(default_factory=list)

    @property
    def stay_rate(self) -> float:
        """Stays over cases that have a previous medication (heads excluded)."""
        denom = self.stay_cases + self.change_cases
        return self.stay_cases / denom if denom else 0.0

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "patients"}
        d["stay_rate"] = self.stay_rate
        d["patients"] = [p.to_dict() for p in self.patients]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class _Row:
    date: date
    kind: str
    code: str
    value: Optional[float]


def _channel_coeffs(cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(cfg.n_channels)
    slope = 0.6 + 0.1 * (idx % 7)
    intercept = (idx % 5).astype(np.float64) - 2.0
    return slope, intercept


def _generate_patient(cfg: GenConfig, pid: str, rng: np.random.Generator,
                      noise_pool: list[str], zipf_w: np.ndarray,
                      head_thr: list[float], pair_thr: list[float],
                      band_thr: list[float]) -> tuple[list[_Row], PatientTruth]:
    eligible = bool(rng.random() < cfg.p_eligible)
    reason = "eligible"
    if not eligible:
        reason = "short" if rng.random() < 0.5 else "nodx"
    n_meds = int(rng.integers(cfg.med_days_range[0], cfg.med_days_range[1] + 1)
                 if reason != "short"
                 else rng.integers(cfg.ineligible_med_days[0],
                                   cfg.ineligible_med_days[1] + 1))
    dx_family = DX_FAMILIES[rng.choice(len(DX_FAMILIES), p=DX_WEIGHTS)]
    emit_dx = reason != "nodx"

    # visit-day schedule: a short observation lead-in, then medication days with
    # observation-only days scattered in each gap
    day0 = cfg.start_date + timedelta(days=int(rng.integers(cfg.start_jitter_days + 1)))
    offsets: list[int] = []
    is_med: list[bool] = []
    n_lead = int(rng.integers(cfg.lead_in_days[0], cfg.lead_in_days[1] + 1))
    cursor = 0
    for _ in range(n_lead):
        offsets.append(cursor)
        is_med.append(False)
        cursor += int(rng.integers(3, 11))
    for _ in range(n_meds):
        gap = int(rng.integers(cfg.med_gap_days[0], cfg.med_gap_days[1] + 1))
        n_obs = int(rng.integers(cfg.obs_days_between[0], cfg.obs_days_between[1] + 1))
        inner = sorted(rng.choice(np.arange(1, gap), size=min(n_obs, gap - 1),
                                  replace=False).tolist())
        for off in inner:
            offsets.append(cursor + off)
            is_med.append(False)
        cursor += gap
        offsets.append(cursor)
        is_med.append(True)
    n_days = len(offsets)

    # latent severity: stationary AR(1) sampled at visit days
    sev = np.empty(n_days)
    sev[0] = rng.normal(0.0, cfg.severity_sd)
    for d in range(1, n_days):
        sev[d] = cfg.severity_rho * sev[d - 1] + rng.normal(0.0, cfg.severity_step)

    med_idx = [i for i, m in enumerate(is_med) if m]
    window_means: list[float] = []
    taus: list[Optional[float]] = []
    p_stays: list[Optional[float]] = []
    stays: list[Optional[bool]] = []
    targets: list[int] = []
    prescriptions: list[int] = []
    delta = cfg.stay_swing_effective
    start = 0
    for k, mi in enumerate(med_idx):
        mean_sev = float(sev[start:mi + 1].mean())
        window_means.append(mean_sev)
        if k == 0:
            tier = _bucket(mean_sev, head_thr)
            taus.append(None)
            p_stays.append(None)
            stays.append(None)
            targets.append(LADDER_MASKS[tier])
            prescriptions.append(LADDER_MASKS[tier])
        else:
            tau = mean_sev - window_means[k - 1]
            taus.append(tau)
            p_stay_k = cfg.p_stay - delta if tau > 0 else cfg.p_stay + delta
            p_stays.append(p_stay_k)
            prev_mask = prescriptions[k - 1]
            # tier of the two-window midpoint: independent of the trend sign,
            # so change-time draws follow the unconditional tier prior
            midpoint = 0.5 * (mean_sev + window_means[k - 1])
            tier = _bucket(midpoint, pair_thr)
            target = LADDER_MASKS[tier]
            if target == prev_mask:
                # a change must differ from the previous combination; redraw
                # from the tier prior (minus the blocked tier) so no tier
                # systematically absorbs the excluded mass
                weights = np.array(LADDER_PROBS)
                weights[tier] = 0.0
                alt = int(rng.choice(len(LADDER_MASKS), p=weights / weights.sum()))
                target = LADDER_MASKS[alt]
            targets.append(target)
            stay = bool(rng.random() < p_stay_k)
            stays.append(stay)
            prescriptions.append(prev_mask if stay else target)
        start = mi + 1

    slope, intercept = _channel_coeffs(cfg)
    rows: list[_Row] = []
    rows_by_kind = {"Diagnosis": 0, "Medication": 0, "Measurement": 0}
    days_by_kind = {"Diagnosis": 0, "Medication": 0, "Measurement": 0}
    med_counter = 0
    for d in range(n_days):
        when = day0 + timedelta(days=offsets[d])
        day_rows: list[_Row] = []
        if d == 0 and emit_dx:
            day_rows.append(_Row(when, "Diagnosis", f"{dx_family}.{rng.integers(10)}", None))
        elif emit_dx and rng.random() < cfg.p_dx_recode:
            day_rows.append(_Row(when, "Diagnosis", f"{dx_family}.{rng.integers(10)}", None))
        band = _bucket(float(sev[d]), band_thr)
        if rng.random() < cfg.p_band_code:
            day_rows.append(_Row(when, "Diagnosis", f"Z0{band}.{rng.integers(10)}", None))
        if rng.random() < cfg.p_adjacent_band:
            adj = min(max(band + (1 if rng.random() < 0.5 else -1), 0), N_BANDS - 1)
            day_rows.append(_Row(when, "Diagnosis", f"Z0{adj}.{rng.integers(10)}", None))
        n_noise = int(rng.integers(cfg.noise_codes_per_day[0],
                                   cfg.noise_codes_per_day[1] + 1))
        for fam_i in rng.choice(len(noise_pool), size=n_noise, p=zipf_w):
            fam = noise_pool[fam_i]
            code = fam if rng.random() < 0.5 else f"{fam}.{rng.integers(10)}"
            day_rows.append(_Row(when, "Diagnosis", code, None))
        if rng.random() < cfg.p_meas:
            chans = [c for c in range(cfg.n_channels) if rng.random() < cfg.q_channel]
            if not chans:
                chans = [int(rng.integers(cfg.n_channels))]
            for c in chans:
                value = float(slope[c] * sev[d] + intercept[c]
                              + rng.normal(0.0, cfg.meas_noise))
                day_rows.append(_Row(when, "Measurement", f"LAB{c:02d}", value))
        if is_med[d]:
            for name in combo_names(prescriptions[med_counter]):
                day_rows.append(_Row(when, "Medication", name, None))
            med_counter += 1
        kinds_today = set()
        for row in day_rows:
            rows_by_kind[row.kind] += 1
            kinds_today.add(row.kind)
        for kind in kinds_today:
            days_by_kind[kind] += 1
        rows.extend(day_rows)

    truth = PatientTruth(
        patient_id=pid,
        eligible=eligible,
        reason=reason,
        dates=[(day0 + timedelta(days=o)).isoformat() for o in offsets],
        severities=[float(s) for s in sev],
        med_day_indices=med_idx,
        window_means=window_means,
        taus=taus,
        p_stays=p_stays,
        stays=stays,
        rule_targets=targets,
        prescriptions=prescriptions,
        rows_by_kind=rows_by_kind,
        days_by_kind=days_by_kind,
    )
    return rows, truth


def generate(cfg: GenConfig, events_path: Optional[str] = None,
             keep_patients: bool = True) -> GenTruth:
    """Generate the synthetic cohort; optionally stream events.csv to disk.

    Byte-identical output for identical configs: every patient derives its RNG
    from the master seed via spawned seed sequences.
    """
    cfg.validate()
    rng_master = np.random.default_rng(cfg.seed)
    noise_pool = _noise_code_pool(cfg, rng_master)
    weights = 1.0 / np.power(np.arange(1, cfg.n_noise_codes + 1) + 2.0,
                             cfg.zipf_exponent)
    zipf_w = weights / weights.sum()
    head_thr = _ladder_thresholds(cfg.window_mean_sd)
    pair_thr = _ladder_thresholds(cfg.pair_mean_sd)
    band_thr = _band_thresholds(cfg)
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_patients)

    truth = GenTruth(
        config=cfg.to_dict(),
        planted_combos=list(LADDER_MASKS),
        class_prior=ladder_class_prior(),
        tier_probs=list(LADDER_PROBS),
        n_patients=cfg.n_patients,
        n_eligible=0,
        totals_rows={"Diagnosis": 0, "Medication": 0, "Measurement": 0},
        totals_days={"Diagnosis": 0, "Medication": 0, "Measurement": 0},
        icd_day_counts={},
        stay_cases=0,
        change_cases=0,
        head_cases=0,
    )
    out = open(events_path, "w", encoding="utf-8", newline="") if events_path else None
    try:
        if out:
            out.write("patient_id,date,kind,code,value\n")
        for i in range(cfg.n_patients):
            pid = f"P{i:05d}"
            rows, ptruth = _generate_patient(cfg, pid, np.random.default_rng(children[i]),
                                             noise_pool, zipf_w, head_thr, pair_thr,
                                             band_thr)
            truth.n_eligible += ptruth.eligible
            truth.head_cases += 1 if ptruth.med_day_indices else 0
            for stay in ptruth.stays:
                if stay is True:
                    truth.stay_cases += 1
                elif stay is False:
                    truth.change_cases += 1
            for kind, n in ptruth.rows_by_kind.items():
                truth.totals_rows[kind] += n
            for kind, n in ptruth.days_by_kind.items():
                truth.totals_days[kind] += n
            day_families = {}
            for row in rows:
                if row.kind == "Diagnosis":
                    fam = row.code[:3].upper()
                    day_families.setdefault(row.date, set()).add(fam)
            for fams in day_families.values():
                for fam in fams:
                    truth.icd_day_counts[fam] = truth.icd_day_counts.get(fam, 0) + 1
            if out:
                for row in rows:
                    value = "" if row.value is None else repr(row.value)
                    out.write(f"{pid},{row.date.isoformat()},{row.kind},"
                              f"{row.code},{value}\n")
            if keep_patients:
                truth.patients.append(ptruth)
    finally:
        if out:
            out.close()
    return truth


@dataclass
class BayesReport:
    """Accuracy ceilings of the true generating rule on freshly generated data."""

    oracle_accuracy: float
    oracle_head_accuracy: float
    prev_accuracy_with_heads: float
    prev_accuracy_non_head: float
    n_cases: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def bayes_rate(cfg: GenConfig, seed_offset: int = 10_000) -> BayesReport:
    """Evaluate the generating rule itself on a held-out replay of the config.

    The oracle knows the latent severities and the rule but not the persistence
    coin: it predicts the previous combination when the trend-modulated stay
    probability is >= 0.5 and the ladder target otherwise. No learner can beat
    it; acceptance thresholds scale against this ceiling.
    """
    held_out = GenConfig(**{**cfg.__dict__, "seed": cfg.seed + seed_offset})
    truth = generate(held_out, events_path=None, keep_patients=True)
    hits = heads = head_hits = stays = prev_hits = non_head = 0
    total = 0
    for p in truth.patients:
        for k, realized in enumerate(p.prescriptions):
            total += 1
            if k == 0:
                heads += 1
                head_hits += p.rule_targets[0] == realized
                hits += p.rule_targets[0] == realized
                continue
            non_head += 1
            prev_mask = p.prescriptions[k - 1]
            prediction = prev_mask if p.p_stays[k] >= 0.5 else p.rule_targets[k]
            hits += prediction == realized
            prev_hits += prev_mask == realized
            stays += p.stays[k]
    return BayesReport(
        oracle_accuracy=hits / total if total else 0.0,
        oracle_head_accuracy=head_hits / heads if heads else 0.0,
        prev_accuracy_with_heads=prev_hits / total if total else 0.0,
        prev_accuracy_non_head=prev_hits / non_head if non_head else 0.0,
        n_cases=total,
    )
