"""Generator determinism, benchmark shapes, and cost-tier guarantees."""

import numpy as np
import pytest

from tmae.claims import Modality, build_vocabulary
from tmae.synth import (
    CohortSpec,
    InfeasibleSpecError,
    condition_cohort_specs,
    cost_tier_specs,
    generate_cohort,
    generate_condition_benchmark,
    generate_cost_tier_benchmark,
    save_dataset,
)
from tmae.claims import load_claims


def small_spec(**overrides):
    base = dict(
        label="toy",
        code_pools={Modality.DIAG: ("A", "B", "C"), Modality.PROC: (),
                    Modality.DRUG: ("X", "Y")},
        code_weights={Modality.DIAG: (1.0, 1.0, 0.01), Modality.PROC: (),
                      Modality.DRUG: (1.0, 1.0)},
        visits_per_year=(3, 6),
        codes_per_visit={Modality.DIAG: (1, 2), Modality.PROC: (0, 0),
                         Modality.DRUG: (0, 1)},
        cost_median=100.0,
        cost_dispersion=0.4,
        claim_type_mix=(0.1, 0.5, 0.4),
        age_range=(2, 17),
        female_fraction=0.5,
    )
    base.update(overrides)
    return CohortSpec(**base)


class TestGenerateCohort:
    def test_n_zero_rejected(self):
        with pytest.raises(ValueError):
            generate_cohort(small_spec(), 0, seed=1)

    def test_deterministic(self):
        a = generate_cohort(small_spec(), 10, seed=5)
        b = generate_cohort(small_spec(), 10, seed=5)
        assert a == b

    def test_seed_changes_output(self):
        a = generate_cohort(small_spec(), 10, seed=5)
        b = generate_cohort(small_spec(), 10, seed=6)
        assert a != b

    def test_visit_count_range_respected(self):
        spec = small_spec(visits_per_year=(10, 12))
        for record in generate_cohort(spec, 30, seed=2):
            assert 10 <= len(record.visits) <= 12

    def test_fields_within_spec_ranges(self):
        spec = small_spec()
        for record in generate_cohort(spec, 30, seed=3):
            assert 2 <= record.demographics.age_years <= 17
            for visit in record.visits:
                assert 0 <= visit.date <= 365
                assert visit.cost >= 0
                for code in visit.diag_codes:
                    assert code in spec.code_pools[Modality.DIAG]

    def test_irregular_spacing(self):
        # at least one patient has non-uniform inter-visit gaps
        found_irregular = False
        for record in generate_cohort(small_spec(visits_per_year=(5, 6)), 20, seed=4):
            dates = [v.date for v in record.visits]
            gaps = {b - a for a, b in zip(dates, dates[1:])}
            if len(gaps) > 1:
                found_irregular = True
        assert found_irregular

    def test_infeasible_annual_range_errors(self):
        spec = small_spec(annual_cost_range=(1e9, 2e9))
        with pytest.raises(InfeasibleSpecError, match="toy"):
            generate_cohort(spec, 1, seed=1)

    def test_annual_range_enforced(self):
        spec = small_spec(annual_cost_range=(200.0, 900.0))
        for record in generate_cohort(spec, 20, seed=9):
            assert 200.0 <= sum(v.cost for v in record.visits) <= 900.0

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="claim_type_mix"):
            small_spec(claim_type_mix=(0.5, 0.5, 0.5))
        with pytest.raises(ValueError, match="median"):
            small_spec(cost_median=0.0)
        with pytest.raises(ValueError, match="drug pool"):
            small_spec(code_pools={Modality.DIAG: ("A",), Modality.PROC: (),
                                   Modality.DRUG: ()},
                       code_weights={Modality.DIAG: (1.0,), Modality.PROC: (),
                                     Modality.DRUG: ()},
                       codes_per_visit={Modality.DIAG: (1, 2), Modality.PROC: (0, 0),
                                        Modality.DRUG: (0, 0)})


class TestConditionBenchmark:
    def test_default_sizes(self):
        ds = generate_condition_benchmark(n_per_cohort=300, seed=7)
        assert len(ds.records) == 1200
        labels = list(ds.truth_labels.values())
        assert sorted(set(labels)) == ["asthma", "depression", "diabetes", "seizure"]
        for label in set(labels):
            assert labels.count(label) == 300

    def test_small_run_arithmetic(self):
        ds = generate_condition_benchmark(n_per_cohort=5, seed=1)
        assert len(ds.records) == 20

    def test_labels_partition_records(self):
        ds = generate_condition_benchmark(n_per_cohort=4, seed=2)
        ids = [r.patient_id for r in ds.records]
        assert len(ids) == len(set(ids))
        assert set(ids) == set(ds.truth_labels)

    def test_n_per_cohort_precondition(self):
        with pytest.raises(ValueError):
            generate_condition_benchmark(n_per_cohort=1, seed=0)

    def test_pairwise_diag_overlap_at_least_20pct(self):
        specs = condition_cohort_specs()
        for i in range(len(specs)):
            for j in range(i + 1, len(specs)):
                a = set(specs[i].code_pools[Modality.DIAG])
                b = set(specs[j].code_pools[Modality.DIAG])
                overlap = len(a & b) / max(len(a), len(b))
                assert overlap >= 0.20

    def test_records_pass_validation_and_category_coverage(self):
        ds = generate_condition_benchmark(n_per_cohort=10, seed=3)
        vocab = build_vocabulary(ds.records, ds.category_map)
        assert vocab.n_diag > 0 and vocab.n_drug > 0

    def test_rare_codes_exist(self):
        ds = generate_condition_benchmark(n_per_cohort=300, seed=7)
        counts = {}
        for record in ds.records:
            for visit in record.visits:
                for code in visit.diag_codes:
                    counts[code] = counts.get(code, 0) + 1
        rare = [c for c, n in counts.items() if n < 5]
        assert len(rare) >= 4, f"expected rare diagnosis codes, got {len(rare)}"


@pytest.fixture(scope="module")
def dataset():
    return generate_cost_tier_benchmark(seed=11)


class TestCostTierBenchmark:

    def test_tier_counts(self, dataset):
        labels = list(dataset.truth_labels.values())
        assert len(dataset.records) == 1100
        assert labels.count("high") == 100
        assert labels.count("medium") == 500
        assert labels.count("low") == 500

    def test_high_tier_annual_cost(self, dataset):
        for record in dataset.records:
            if dataset.truth_labels[record.patient_id] == "high":
                assert sum(v.cost for v in record.visits) > 8000.0

    def test_low_tier_annual_cost(self, dataset):
        for record in dataset.records:
            if dataset.truth_labels[record.patient_id] == "low":
                assert 100.0 <= sum(v.cost for v in record.visits) <= 500.0

    def test_medium_tier_annual_cost(self, dataset):
        for record in dataset.records:
            if dataset.truth_labels[record.patient_id] == "medium":
                assert 1000.0 <= sum(v.cost for v in record.visits) <= 2000.0

    def test_visits_in_10_to_12(self, dataset):
        for record in dataset.records:
            assert 10 <= len(record.visits) <= 12

    def test_tiers_share_code_pools(self):
        specs = cost_tier_specs()
        for modality in Modality:
            pools = {s.code_pools[modality] for s in specs}
            weights = {s.code_weights[modality] for s in specs}
            assert len(pools) == 1
            assert len(weights) == 1


class TestDatasetIo:
    def test_save_and_reload(self, tmp_path):
        ds = generate_condition_benchmark(n_per_cohort=3, seed=13)
        save_dataset(ds, tmp_path)
        reloaded = load_claims(tmp_path / "claims.jsonl")
        assert tuple(reloaded) == ds.records

    def test_byte_identical_across_runs(self, tmp_path):
        for name in ("a", "b"):
            ds = generate_condition_benchmark(n_per_cohort=3, seed=13)
            save_dataset(ds, tmp_path / name)
        assert ((tmp_path / "a" / "claims.jsonl").read_bytes()
                == (tmp_path / "b" / "claims.jsonl").read_bytes())
