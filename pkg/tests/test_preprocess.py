"""Alignment, normalization, cohort selection, case building, splitting."""
import numpy as np
import pytest

from medseq.ehr import (
    DrugClass,
    IcdVocab,
    MeasurementVocab,
    DrugComboVocab,
    combo_from_vec,
)
from medseq.preprocess import (
    AggSpec,
    EmptyCohortError,
    Position,
    VisitVector,
    aggregate,
    align_patient_day,
    build_cases,
    build_pending_case,
    impute_missing,
    normalize,
    select_cohort,
    split_by_patient,
)

from helpers import make_timeline


class TestNormalize:
    def test_mean_maps_to_zero(self):
        assert normalize(6.13, 6.13, 2.0) == 0.0

    def test_one_sigma(self):
        assert normalize(7.0, 5.0, 2.0) == 1.0

    def test_fpg_hand_value(self):
        assert normalize(8.13, 6.13, 2.0) == pytest.approx(1.0)

    def test_constant_channel(self):
        assert normalize(42.0, 5.0, 0.0) == 0.0

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            normalize(float("nan"), 0.0, 1.0)
        with pytest.raises(ValueError):
            normalize(float("inf"), 0.0, 1.0)


@pytest.fixture
def small_meas_vocab():
    mu = np.array([6.13, 120.0])
    sigma = np.array([2.0, 10.0])
    return MeasurementVocab(("FPG", "SBP"), mu, sigma, sigma == 0.0)


class TestImpute:
    def test_empty_map(self, small_meas_vocab):
        values, mask = impute_missing({}, small_meas_vocab)
        assert not values.any() and not mask.any()

    def test_observed_at_mean(self, small_meas_vocab):
        values, mask = impute_missing({"FPG": 6.13}, small_meas_vocab)
        assert values[0] == 0.0
        np.testing.assert_array_equal(mask, [1.0, 0.0])

    def test_unknown_channel(self, small_meas_vocab):
        with pytest.raises(KeyError):
            impute_missing({"XXX": 1.0}, small_meas_vocab)

    def test_observed_count(self):
        vocab = MeasurementVocab.from_codes([f"C{i}" for i in range(10)])
        values, mask = impute_missing({"C1": 1.0, "C4": 2.0, "C9": 3.0}, vocab)
        assert mask.sum() == 3


def figure1_timeline():
    return make_timeline("p1", [
        ("2015-06-15", [("meas", "FPG", 8.13), ("dx", "E14"),
                        ("med", "Biguanides")]),
        ("2015-07-08", [("meas", "SBP", 139.0), ("dx", "I10.x02")]),
        ("2015-08-24", [("med", "Biguanides"), ("med", "Sulfonylureas")]),
    ])


@pytest.fixture
def figure1_vocabs(small_meas_vocab):
    return IcdVocab(("E14", "I10"), 350), small_meas_vocab


class TestAlign:
    def test_figure1_first_day(self, figure1_vocabs):
        icd_vocab, meas_vocab = figure1_vocabs
        days = align_patient_day(figure1_timeline(), icd_vocab, meas_vocab)
        day0 = days[0]
        assert day0.visit.icd[icd_vocab.encode("E14")] == 1.0
        assert day0.visit.meas_mask[meas_vocab.encode("FPG")] == 1.0
        assert day0.visit.meas[0] == pytest.approx(1.0)  # (8.13-6.13)/2
        assert day0.drugs[DrugClass.BIGUANIDES] == 1.0
        assert day0.drugs.sum() == 1.0

    def test_observation_day_has_no_drugs(self, figure1_vocabs):
        days = align_patient_day(figure1_timeline(), *figure1_vocabs)
        assert not days[1].drugs.any()
        assert days[1].visit.icd[1] == 1.0  # I10 via 3-digit mapping

    def test_same_day_measurements_averaged_before_normalization(self, small_meas_vocab):
        vocab = MeasurementVocab(("FPG",), np.array([7.0]), np.array([1.0]),
                                 np.array([False]))
        tl = make_timeline("p1", [
            ("2020-01-01", [("meas", "FPG", 6.0), ("meas", "FPG", 8.0)]),
        ])
        days = align_patient_day(tl, IcdVocab((), 1), vocab)
        assert days[0].visit.meas[0] == 0.0  # mean 7 normalizes to 0
        assert days[0].visit.meas_mask[0] == 1.0

    def test_repeated_diagnosis_one_bit(self, figure1_vocabs):
        icd_vocab, meas_vocab = figure1_vocabs
        tl = make_timeline("p1", [
            ("2020-01-01", [("dx", "E14.1"), ("dx", "E14.2")]),
        ])
        days = align_patient_day(tl, icd_vocab, meas_vocab)
        assert days[0].visit.icd.sum() == 1.0


def timeline_with_meds(pid, n_meds, dx_code="E11", start_day=1):
    specs = []
    for i in range(n_meds):
        events = [("med", "Insulin")]
        if i == 0 and dx_code:
            events.append(("dx", dx_code))
        specs.append((f"2020-01-{start_day + i:02d}", events))
    return make_timeline(pid, specs)


class TestCohort:
    def test_kept_with_diabetes_and_11_meds(self):
        tl = timeline_with_meds("p1", 11)
        assert select_cohort([tl]) == [tl]

    def test_dropped_without_diabetes_code(self):
        tl = timeline_with_meds("p1", 11, dx_code="I10")
        with pytest.raises(EmptyCohortError):
            select_cohort([tl])

    def test_dropped_with_exactly_min_meds(self):
        tl = timeline_with_meds("p1", 10)
        with pytest.raises(EmptyCohortError):
            select_cohort([tl])

    def test_generator_planted_eligibility(self, tmp_path):
        from medseq.synthdata import GenConfig, generate
        from medseq.ehr import ingest_events

        path = tmp_path / "events.csv"
        truth = generate(GenConfig(n_patients=100, seed=6, p_eligible=0.8),
                         str(path))
        result = ingest_events(str(path))
        kept = select_cohort(result.timelines)
        assert len(kept) == truth.n_eligible
        eligible_ids = {p.patient_id for p in truth.patients if p.eligible}
        assert {tl.patient_id for tl in kept} == eligible_ids


class TestAggregate:
    def agg_specs(self):
        return [AggSpec(icd=i, meas=m) for i in ("max", "count")
                for m in ("mean", "max")]

    def test_singleton_idempotent_all_choices(self):
        rng = np.random.default_rng(0)
        for spec in self.agg_specs():
            icd = (rng.random(5) < 0.5).astype(float)
            mask = (rng.random(3) < 0.5).astype(float)
            meas = rng.normal(size=3) * mask
            v = VisitVector(icd, meas, mask)
            out = aggregate([v], spec)
            np.testing.assert_array_equal(out.icd, icd)
            np.testing.assert_array_equal(out.meas, meas)
            np.testing.assert_array_equal(out.meas_mask, mask)

    def test_disjoint_icd_union(self):
        a = VisitVector(np.array([1.0, 0.0]), np.zeros(1), np.zeros(1))
        b = VisitVector(np.array([0.0, 1.0]), np.zeros(1), np.zeros(1))
        out = aggregate([a, b], AggSpec())
        np.testing.assert_array_equal(out.icd, [1.0, 1.0])

    def test_mask_weighted_average_ignores_missing(self):
        observed = VisitVector(np.zeros(1), np.array([1.0]), np.array([1.0]))
        missing = VisitVector(np.zeros(1), np.array([0.0]), np.array([0.0]))
        out = aggregate([observed, missing], AggSpec(meas="mean"))
        assert out.meas[0] == 1.0  # not the naive 0.5
        assert out.meas_mask[0] == 1.0

    def test_count_counts_days(self):
        a = VisitVector(np.array([1.0]), np.zeros(1), np.zeros(1))
        out = aggregate([a, a, a], AggSpec(icd="count"))
        assert out.icd[0] == 3.0

    def test_meas_max_over_observed(self):
        lo = VisitVector(np.zeros(1), np.array([-2.0]), np.array([1.0]))
        hi = VisitVector(np.zeros(1), np.array([0.5]), np.array([1.0]))
        none = VisitVector(np.zeros(1), np.array([0.0]), np.array([0.0]))
        out = aggregate([lo, hi, none], AggSpec(meas="max"))
        assert out.meas[0] == 0.5

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError):
            aggregate([], AggSpec())

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            AggSpec(icd="sum")


class TestBuildCases:
    def vocabs(self):
        return (IcdVocab(("E14", "I10"), 350),
                MeasurementVocab(("FPG", "SBP"), np.array([6.13, 120.0]),
                                 np.array([2.0, 10.0]), np.zeros(2, dtype=bool)),
                DrugComboVocab((combo_from_vec([1, 0, 0, 0, 0, 0, 0]),
                                combo_from_vec([1, 1, 0, 0, 0, 0, 0]))))

    def test_figure1_final_case(self):
        icd, meas, combos = self.vocabs()
        cases = build_cases(figure1_timeline(), icd, meas, combos, "with_prev")
        assert len(cases) == 2
        case = cases[1]
        final = case.outer_steps[-1]
        assert len(final.inner_steps) == 2  # 2015-07-08 and 2015-08-24
        np.testing.assert_array_equal(
            final.prev_drugs,
            [1, 0, 0, 0, 0, 0, 0])
        np.testing.assert_array_equal(case.label_dc, [1, 1, 0, 0, 0, 0, 0])
        assert case.label_dcc == 1
        assert case.position == Position.TAIL

    def test_first_case_head_with_leadin_window(self):
        icd, meas, combos = self.vocabs()
        cases = build_cases(figure1_timeline(), icd, meas, combos, "with_prev")
        head = cases[0]
        assert head.position == Position.HEAD
        assert len(head.outer_steps) == 1
        assert len(head.outer_steps[0].inner_steps) == 1  # only 2015-06-15
        assert not head.outer_steps[0].prev_drugs.any()

    def test_single_medication_patient_is_head(self):
        icd, meas, combos = self.vocabs()
        tl = make_timeline("p1", [("2020-01-01", [("dx", "E14"),
                                                  ("med", "Biguanides")])])
        cases = build_cases(tl, icd, meas, combos, "with_prev")
        assert len(cases) == 1
        assert cases[0].position == Position.HEAD

    def test_outer_truncation_at_25_meds(self):
        icd, meas, combos = self.vocabs()
        tl = timeline_with_meds("p1", 25, dx_code="E14")
        cases = build_cases(tl, icd, meas, combos, "with_prev", l_outer=20)
        assert len(cases) == 25
        assert len(cases[-1].outer_steps) == 20
        assert len(cases[0].outer_steps) == 1

    def test_truncation_monotonicity(self):
        icd, meas, combos = self.vocabs()
        tl = timeline_with_meds("p1", 25, dx_code="E14")
        short = build_cases(tl, icd, meas, combos, "with_prev", l_outer=5)
        long = build_cases(tl, icd, meas, combos, "with_prev", l_outer=15)
        for s, l in zip(short, long):
            assert len(l.outer_steps) >= len(s.outer_steps)

    def test_prev_drugs_chain_and_truncated_window_prev(self):
        icd, meas, combos = self.vocabs()
        specs = []
        drugs = ["Biguanides", "Sulfonylureas", "Glinide", "TZDs", "AGIs"]
        for i, d in enumerate(drugs):
            events = [("med", d)]
            if i == 0:
                events.append(("dx", "E14"))
            specs.append((f"2020-01-{i + 1:02d}", events))
        tl = make_timeline("p1", specs)
        cases = build_cases(tl, icd, meas, combos, "with_prev", l_outer=2)
        last = cases[-1]
        assert len(last.outer_steps) == 2
        # first step of the truncated window still knows its true predecessor
        np.testing.assert_array_equal(
            last.outer_steps[0].prev_drugs,
            [0, 0, 1, 0, 0, 0, 0])  # Glinide preceded TZDs

    def test_meds_before_first_diagnosis_not_indexed(self):
        icd, meas, combos = self.vocabs()
        tl = make_timeline("p1", [
            ("2020-01-01", [("med", "Biguanides")]),
            ("2020-01-05", [("dx", "E14"), ("med", "Biguanides")]),
            ("2020-01-09", [("med", "Sulfonylureas")]),
        ])
        cases = build_cases(tl, icd, meas, combos, "with_prev")
        assert len(cases) == 2
        assert cases[0].position == Position.HEAD
        # the pre-diagnosis medication never appears as a prev feature
        assert not cases[0].outer_steps[0].prev_drugs.any()

    def test_label_reachability(self):
        icd, meas, combos = self.vocabs()
        cases = build_cases(figure1_timeline(), icd, meas, combos, "with_prev")
        for case in cases:
            assert combos.decode(case.label_dcc) == combo_from_vec(case.label_dc)

    def test_inner_truncation(self):
        icd, meas, combos = self.vocabs()
        specs = [(f"2020-01-{i:02d}", [("dx", "E14" if i == 1 else "I10")])
                 for i in range(1, 9)]
        specs.append(("2020-01-09", [("med", "Biguanides")]))
        tl = make_timeline("p1", specs)
        cases = build_cases(tl, icd, meas, combos, "with_prev", l_inner=3)
        assert len(cases[0].outer_steps[0].inner_steps) == 3  # most recent 3


class TestPendingCase:
    def test_pending_window_after_last_med(self):
        icd = IcdVocab(("E14", "I10"), 350)
        meas = MeasurementVocab.from_codes(["FPG"])
        tl = make_timeline("p1", [
            ("2020-01-01", [("dx", "E14"), ("med", "Biguanides")]),
            ("2020-01-10", [("dx", "I10")]),
            ("2020-01-12", [("dx", "I10")]),
        ])
        case = build_pending_case(tl, icd, meas, "with_prev")
        assert len(case.outer_steps) == 2
        pending = case.outer_steps[-1]
        assert len(pending.inner_steps) == 2  # the two observation days
        np.testing.assert_array_equal(pending.prev_drugs, [1, 0, 0, 0, 0, 0, 0])

    def test_with_prev_requires_history(self):
        icd = IcdVocab(("E14",), 350)
        meas = MeasurementVocab.from_codes([])
        tl = make_timeline("p1", [("2020-01-01", [("dx", "E14")])])
        with pytest.raises(ValueError):
            build_pending_case(tl, icd, meas, "with_prev")
        case = build_pending_case(tl, icd, meas, "without_prev")
        assert len(case.outer_steps) == 1


class TestSplit:
    def test_ten_patients(self):
        split = split_by_patient([f"p{i}" for i in range(10)])
        assert (len(split.train), len(split.validation), len(split.test)) == (8, 1, 1)

    def test_deterministic(self):
        ids = [f"p{i}" for i in range(37)]
        a = split_by_patient(ids, seed=5)
        b = split_by_patient(ids, seed=5)
        assert a == b
        c = split_by_patient(ids, seed=6)
        assert a != c

    def test_disjoint_and_complete(self):
        ids = [f"p{i}" for i in range(101)]
        split = split_by_patient(ids, seed=3)
        assert not (split.train & split.validation)
        assert not (split.train & split.test)
        assert not (split.validation & split.test)
        assert split.train | split.validation | split.test == set(ids)

    def test_paper_cohort_counts(self):
        ids = [f"p{i:06d}" for i in range(21796)]
        split = split_by_patient(ids, (0.8, 0.1, 0.1), seed=0)
        assert len(split.train) == 17436
        assert len(split.validation) == 2180
        assert len(split.test) == 2180

    def test_too_few_patients(self):
        with pytest.raises(EmptyCohortError):
            split_by_patient(["a", "b"])

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            split_by_patient(["a", "b", "c"], (0.5, 0.2, 0.2))
