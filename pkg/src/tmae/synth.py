"""Synthetic claims generator with ground-truth cohort labels.

Two built-in benchmarks mirror the evaluation setup this project targets:

* condition benchmark: four chronic-condition cohorts (asthma, diabetes,
  depression, seizure analogs) whose diagnosis pools partially overlap, so
  separating them is non-trivial;
* cost-tier benchmark: three tiers of asthma-like patients sharing one code
  pool and differing only in expenditure scale and claim-type mix, so the
  codes carry no tier signal by construction.

Generation is deterministic: every patient draws from a stream derived from
(master seed, cohort label, patient index), so cohorts can be generated in
any order or in parallel with identical output.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .claims import (
    CategoryMap,
    Demographics,
    Modality,
    PatientRecord,
    Visit,
    write_category_map,
    write_claims,
)
from .seeding import derive_rng

# Inpatient claims run an order of magnitude costlier than outpatient;
# pharmacy lines are cheaper. Applied on top of each cohort's base cost.
CLAIM_TYPE_COST_MULT = {"IP": 6.0, "OP": 1.0, "RX": 0.4}

# Fraction of each code pool downweighted 100x to make rare-code handling
# measurable downstream.
RARE_POOL_FRACTION = 0.10
RARE_WEIGHT_DIVISOR = 100.0

_RESAMPLE_LIMIT = 1000


class InfeasibleSpecError(ValueError):
    """Annual cost range unreachable after the resampling budget."""


@dataclass(frozen=True)
class CohortSpec:
    """Sampling recipe for one labeled patient cohort."""

    label: str
    code_pools: Mapping[Modality, tuple[str, ...]]
    code_weights: Mapping[Modality, tuple[float, ...]]
    visits_per_year: tuple[int, int]
    codes_per_visit: Mapping[Modality, tuple[int, int]]
    cost_median: float
    cost_dispersion: float
    claim_type_mix: tuple[float, float, float]  # IP, OP, RX
    age_range: tuple[int, int]
    female_fraction: float
    annual_cost_range: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("cohort label must be non-empty")
        if abs(sum(self.claim_type_mix) - 1.0) > 1e-9 or min(self.claim_type_mix) < 0:
            raise ValueError(f"{self.label}: claim_type_mix must be probabilities summing to 1")
        for name, (lo, hi) in (("visits_per_year", self.visits_per_year),
                               ("age_range", self.age_range)):
            if lo > hi or lo < 0:
                raise ValueError(f"{self.label}: empty {name} range [{lo}, {hi}]")
        if self.visits_per_year[0] < 1:
            raise ValueError(f"{self.label}: visits_per_year must start at 1 or more")
        if self.cost_median <= 0:
            raise ValueError(f"{self.label}: cost median must be positive")
        if self.cost_dispersion < 0:
            raise ValueError(f"{self.label}: cost dispersion must be >= 0")
        if not 0.0 <= self.female_fraction <= 1.0:
            raise ValueError(f"{self.label}: female_fraction must be in [0, 1]")
        for modality in Modality:
            pool = self.code_pools.get(modality, ())
            weights = self.code_weights.get(modality, ())
            if len(pool) != len(weights):
                raise ValueError(f"{self.label}: {modality.value} pool and weights differ "
                                 f"in length")
            if any(w <= 0 for w in weights):
                raise ValueError(f"{self.label}: {modality.value} weights must be positive")
            lo, hi = self.codes_per_visit.get(modality, (0, 0))
            if lo > hi or lo < 0:
                raise ValueError(f"{self.label}: empty codes_per_visit range for "
                                 f"{modality.value}")
            if hi > 0 and not pool:
                raise ValueError(f"{self.label}: codes_per_visit asks for {modality.value} "
                                 f"codes but the pool is empty")
        if self.claim_type_mix[2] > 0 and not self.code_pools.get(Modality.DRUG):
            raise ValueError(f"{self.label}: RX visits need a non-empty drug pool")
        if self.annual_cost_range is not None:
            lo, hi = self.annual_cost_range
            if lo < 0 or lo > hi:
                raise ValueError(f"{self.label}: bad annual_cost_range [{lo}, {hi}]")

    def to_obj(self) -> dict:
        """JSON-ready form, used for spec hashing and custom spec files."""
        return {
            "label": self.label,
            "code_pools": {m.value: list(self.code_pools.get(m, ())) for m in Modality},
            "code_weights": {m.value: list(self.code_weights.get(m, ())) for m in Modality},
            "visits_per_year": list(self.visits_per_year),
            "codes_per_visit": {m.value: list(self.codes_per_visit.get(m, (0, 0)))
                                for m in Modality},
            "cost_median": self.cost_median,
            "cost_dispersion": self.cost_dispersion,
            "claim_type_mix": list(self.claim_type_mix),
            "age_range": list(self.age_range),
            "female_fraction": self.female_fraction,
            "annual_cost_range": (list(self.annual_cost_range)
                                  if self.annual_cost_range else None),
        }

    @classmethod
    def from_obj(cls, obj: Mapping) -> "CohortSpec":
        return cls(
            label=obj["label"],
            code_pools={Modality(m): tuple(v) for m, v in obj["code_pools"].items()},
            code_weights={Modality(m): tuple(v) for m, v in obj["code_weights"].items()},
            visits_per_year=tuple(obj["visits_per_year"]),
            codes_per_visit={Modality(m): tuple(v)
                             for m, v in obj["codes_per_visit"].items()},
            cost_median=float(obj["cost_median"]),
            cost_dispersion=float(obj["cost_dispersion"]),
            claim_type_mix=tuple(obj["claim_type_mix"]),
            age_range=tuple(obj["age_range"]),
            female_fraction=float(obj["female_fraction"]),
            annual_cost_range=(tuple(obj["annual_cost_range"])
                               if obj.get("annual_cost_range") else None),
        )


@dataclass(frozen=True)
class LabeledDataset:
    """Records plus the ground-truth cohort label of every patient."""

    records: tuple[PatientRecord, ...]
    truth_labels: dict  # patient_id -> label
    category_map: CategoryMap

    def __post_init__(self) -> None:
        ids = [r.patient_id for r in self.records]
        if set(ids) != set(self.truth_labels):
            raise ValueError("truth labels do not exactly cover the records")


def _sample_codes(rng: np.random.Generator, pool: tuple[str, ...],
                  weights: np.ndarray, count: int) -> tuple[str, ...]:
    count = min(count, len(pool))
    if count == 0:
        return ()
    idx = rng.choice(len(pool), size=count, replace=False, p=weights)
    return tuple(pool[i] for i in idx)


def _generate_patient(spec: CohortSpec, patient_id: str,
                      rng: np.random.Generator) -> PatientRecord:
    age = int(rng.integers(spec.age_range[0], spec.age_range[1] + 1))
    gender = "F" if rng.random() < spec.female_fraction else "M"
    n_visits = int(rng.integers(spec.visits_per_year[0], spec.visits_per_year[1] + 1))

    # Irregular spacing: geometric gaps rescaled into the year.
    gaps = rng.geometric(p=0.15, size=n_visits + 1).astype(np.float64)
    cum = np.cumsum(gaps)
    dates = np.floor(cum[:n_visits] / cum[-1] * 365.0).astype(int)

    types = [("IP", "OP", "RX")[i]
             for i in rng.choice(3, size=n_visits, p=list(spec.claim_type_mix))]

    norm_weights = {}
    for modality in Modality:
        w = np.asarray(spec.code_weights.get(modality, ()), dtype=np.float64)
        norm_weights[modality] = w / w.sum() if w.size else w

    visit_codes = []
    for t in range(n_visits):
        per_mod = {}
        for modality in Modality:
            lo, hi = spec.codes_per_visit.get(modality, (0, 0))
            count = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
            per_mod[modality] = count
        if types[t] == "RX" and per_mod[Modality.DRUG] == 0:
            per_mod[Modality.DRUG] = 1
        if sum(per_mod.values()) == 0:
            # a visit must carry at least one code; fall back to any stocked pool
            for modality in Modality:
                if spec.code_pools.get(modality):
                    per_mod[modality] = 1
                    break
        visit_codes.append({
            modality: _sample_codes(rng, tuple(spec.code_pools.get(modality, ())),
                                    norm_weights[modality], per_mod[modality])
            for modality in Modality
        })

    mults = np.array([CLAIM_TYPE_COST_MULT[t] for t in types])

    def draw_costs() -> np.ndarray:
        base = rng.lognormal(mean=np.log(spec.cost_median),
                             sigma=spec.cost_dispersion, size=n_visits)
        return np.round(base * mults, 2)

    costs = draw_costs()
    if spec.annual_cost_range is not None:
        lo, hi = spec.annual_cost_range
        attempts = 1
        while not lo <= float(costs.sum()) <= hi:
            if attempts >= _RESAMPLE_LIMIT:
                raise InfeasibleSpecError(
                    f"cohort {spec.label!r}: annual cost range [{lo}, {hi}] not reached "
                    f"after {_RESAMPLE_LIMIT} resamples")
            costs = draw_costs()
            attempts += 1

    visits = []
    for t in np.argsort(dates, kind="stable"):
        codes = visit_codes[t]
        visits.append(Visit(
            date=int(dates[t]),
            claim_type=types[t],
            diag_codes=codes[Modality.DIAG],
            proc_codes=codes[Modality.PROC],
            drug_codes=codes[Modality.DRUG],
            cost=float(costs[t]),
        ))
    return PatientRecord(patient_id, Demographics(age, gender), tuple(visits))


def generate_cohort(spec: CohortSpec, n: int, seed: int) -> list[PatientRecord]:
    """Generate exactly ``n`` validated records for one cohort.

    Deterministic in (spec, n, seed); each patient uses a derived stream so
    output does not depend on generation order.
    """
    if n < 1:
        raise ValueError(f"cohort size must be >= 1, got {n}")
    records = []
    for i in range(n):
        rng = derive_rng(seed, f"cohort:{spec.label}:{i}")
        records.append(_generate_patient(spec, f"{spec.label}-{i:05d}", rng))
    return records


# ---------------------------------------------------------------------------
# built-in code universe


N_DIAG, N_PROC, N_DRUG, N_CATEGORIES = 200, 100, 80, 40

DIAG_CODES = tuple(f"D{i:03d}" for i in range(N_DIAG))
PROC_CODES = tuple(f"P{i:03d}" for i in range(N_PROC))
DRUG_CODES = tuple(f"R{i:03d}" for i in range(N_DRUG))


def default_category_map() -> CategoryMap:
    """Category assignment for the full synthetic universe.

    Diagnosis codes group in blocks of five, so a rare code always has
    common same-category siblings.
    """
    out: CategoryMap = {}
    for i, code in enumerate(DIAG_CODES):
        out[(Modality.DIAG, code)] = f"CAT{i // 5:02d}"
    for i, code in enumerate(PROC_CODES):
        out[(Modality.PROC, code)] = f"CAT{20 + i // 5:02d}"
    for i, code in enumerate(DRUG_CODES):
        out[(Modality.DRUG, code)] = f"CAT{i // 2:02d}"
    return out


def _pool_weights(size: int) -> tuple[float, ...]:
    # uniform base with a rare tail: the last 10% of the pool is 100x rarer
    n_rare = max(1, int(size * RARE_POOL_FRACTION))
    weights = [1.0] * (size - n_rare) + [1.0 / RARE_WEIGHT_DIVISOR] * n_rare
    return tuple(weights)


def _block(codes: Sequence[str], start: int, size: int) -> tuple[str, ...]:
    return tuple(codes[start:start + size])


def _condition_pool(diag_start: int, proc_start: int, drug_start: int):
    """Pool = shared primary-care block + a condition-specific block."""
    diag = _block(DIAG_CODES, 0, 24) + _block(DIAG_CODES, diag_start, 36)
    proc = _block(PROC_CODES, 0, 10) + _block(PROC_CODES, proc_start, 15)
    drug = _block(DRUG_CODES, 0, 8) + _block(DRUG_CODES, drug_start, 12)
    pools = {Modality.DIAG: diag, Modality.PROC: proc, Modality.DRUG: drug}
    weights = {m: _pool_weights(len(p)) for m, p in pools.items()}
    return pools, weights


def condition_cohort_specs() -> list[CohortSpec]:
    """Four chronic-condition analogs with overlapping code pools."""
    shared_kwargs = dict(cost_dispersion=0.35)
    asthma_pools, asthma_weights = _condition_pool(24, 10, 8)
    diabetes_pools, diabetes_weights = _condition_pool(60, 25, 20)
    depression_pools, depression_weights = _condition_pool(96, 40, 32)
    seizure_pools, seizure_weights = _condition_pool(132, 55, 44)
    counts = {Modality.DIAG: (1, 3), Modality.PROC: (0, 2), Modality.DRUG: (0, 2)}
    return [
        CohortSpec("asthma", asthma_pools, asthma_weights, (10, 12), counts,
                   cost_median=95.0, claim_type_mix=(0.04, 0.56, 0.40),
                   age_range=(2, 18), female_fraction=0.46, **shared_kwargs),
        CohortSpec("diabetes", diabetes_pools, diabetes_weights, (8, 14), counts,
                   cost_median=240.0, claim_type_mix=(0.06, 0.49, 0.45),
                   age_range=(6, 18), female_fraction=0.50, **shared_kwargs),
        CohortSpec("depression", depression_pools, depression_weights, (6, 12), counts,
                   cost_median=150.0, claim_type_mix=(0.02, 0.63, 0.35),
                   age_range=(10, 18), female_fraction=0.60, **shared_kwargs),
        CohortSpec("seizure", seizure_pools, seizure_weights, (7, 13), counts,
                   cost_median=400.0, claim_type_mix=(0.10, 0.50, 0.40),
                   age_range=(2, 18), female_fraction=0.45, **shared_kwargs),
    ]


def cost_tier_specs() -> list[CohortSpec]:
    """Three expenditure tiers over one shared asthma-like pool."""
    pools, weights = _condition_pool(24, 10, 8)
    counts = {Modality.DIAG: (1, 3), Modality.PROC: (0, 2), Modality.DRUG: (0, 2)}
    common = dict(code_pools=pools, code_weights=weights, visits_per_year=(10, 12),
                  codes_per_visit=counts, age_range=(2, 18), female_fraction=0.46)
    return [
        CohortSpec("high", cost_median=900.0, cost_dispersion=0.5,
                   claim_type_mix=(0.25, 0.60, 0.15),
                   annual_cost_range=(8000.01, 1e12), **common),
        CohortSpec("medium", cost_median=159.0, cost_dispersion=0.35,
                   claim_type_mix=(0.0, 0.60, 0.40),
                   annual_cost_range=(1000.0, 2000.0), **common),
        CohortSpec("low", cost_median=34.0, cost_dispersion=0.35,
                   claim_type_mix=(0.0, 0.50, 0.50),
                   annual_cost_range=(100.0, 500.0), **common),
    ]


def _assemble(cohorts: Sequence[tuple[CohortSpec, int]], seed: int) -> LabeledDataset:
    records: list[PatientRecord] = []
    labels: dict = {}
    for spec, n in cohorts:
        cohort_records = generate_cohort(spec, n, seed)
        records.extend(cohort_records)
        for r in cohort_records:
            labels[r.patient_id] = spec.label
    return LabeledDataset(tuple(records), labels, default_category_map())


def generate_condition_benchmark(n_per_cohort: int = 300, seed: int = 0) -> LabeledDataset:
    """Clustering task 1 analog: four health-condition cohorts."""
    if n_per_cohort < 2:
        raise ValueError(f"n_per_cohort must be >= 2, got {n_per_cohort}")
    return _assemble([(spec, n_per_cohort) for spec in condition_cohort_specs()], seed)


def generate_cost_tier_benchmark(seed: int = 0) -> LabeledDataset:
    """Clustering task 2 analog: 100 high / 500 medium / 500 low utilizers."""
    sizes = {"high": 100, "medium": 500, "low": 500}
    return _assemble([(spec, sizes[spec.label]) for spec in cost_tier_specs()], seed)


def generate_custom_benchmark(specs_with_counts: Sequence[tuple[CohortSpec, int]],
                              category_map: CategoryMap, seed: int) -> LabeledDataset:
    ds = _assemble(specs_with_counts, seed)
    return LabeledDataset(ds.records, ds.truth_labels, dict(category_map))


# ---------------------------------------------------------------------------
# on-disk layout


def write_truth_labels(truth_labels: Mapping[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for pid, label in truth_labels.items():
            f.write(f"{pid}\t{label}\n")


def load_truth_labels(path) -> dict:
    out: dict = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            pid, label = line.split("\t")
            out[pid] = label
    return out


def save_dataset(dataset: LabeledDataset, out_dir) -> dict:
    """Write claims.jsonl, truth_labels.tsv, and category_map.tsv.

    Returns the relative file names written.
    """
    os.makedirs(out_dir, exist_ok=True)
    files = {
        "claims": "claims.jsonl",
        "truth_labels": "truth_labels.tsv",
        "category_map": "category_map.tsv",
    }
    write_claims(dataset.records, os.path.join(out_dir, files["claims"]))
    write_truth_labels(dataset.truth_labels, os.path.join(out_dir, files["truth_labels"]))
    write_category_map(dataset.category_map, os.path.join(out_dir, files["category_map"]))
    return files


def spec_hash(payload) -> str:
    """Stable hash of a JSON-serializable generation recipe."""
    import hashlib

    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
