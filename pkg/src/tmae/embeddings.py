"""Embedding layers: codes with category halves, demographics, dates, costs.

Every visit becomes a variable-height matrix whose rows are, in order, the
embeddings of its diagnosis, procedure, and drug codes, then one utilization
row, one date row, and one cost row. Max-pooling over the rows yields the
fixed-width visit vector regardless of how many codes the visit carries.

Date and cost enter through fixed sinusoids over the day offset and the
expenditure quantile bin (learnable tables are available behind a config
flag for ablation).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .claims import CodeVocabulary, Demographics, EncodedVisit, Modality, PatientRecord
from .seeding import derive_rng

TABLE_INIT_RANGE = 0.05
N_COST_BINS = 100
MAX_DATE = 365


# ---------------------------------------------------------------------------
# cost binning


class CostBinner:
    """Equal-frequency discretizer of observed expenditures into 100 bins.

    ``edges`` has 101 non-decreasing entries: the fitted minimum, the 99
    interior order statistics, and the fitted maximum. Queries map to the
    right-open bin containing them; everything below the minimum is bin 0
    and everything above the maximum is bin 99. A fully degenerate fit (all
    interior edges equal) collapses to a single bin, so every query is 0.
    """

    def __init__(self, edges: np.ndarray, fitted_on: int) -> None:
        edges = np.asarray(edges, dtype=np.float64)
        if edges.shape != (N_COST_BINS + 1,):
            raise ValueError(f"expected {N_COST_BINS + 1} edges, got {edges.shape}")
        if np.any(np.diff(edges) < 0):
            raise ValueError("bin edges must be non-decreasing")
        self.edges = edges
        self.fitted_on = int(fitted_on)
        self._inner = edges[1:N_COST_BINS]
        self._degenerate = bool(self._inner[0] == self._inner[-1])

    @property
    def n_bins(self) -> int:
        return N_COST_BINS

    def bin_of(self, cost: float) -> int:
        if self._degenerate:
            return 0
        return int(np.searchsorted(self._inner, cost, side="right"))

    def bins_of(self, costs) -> np.ndarray:
        costs = np.asarray(costs, dtype=np.float64)
        if self._degenerate:
            return np.zeros(costs.shape, dtype=np.intp)
        return np.searchsorted(self._inner, costs, side="right").astype(np.intp)


def fit_cost_bins(costs: Sequence[float]) -> CostBinner:
    """Fit 100 equal-population quantile bins on observed costs.

    Needs at least 100 observations; with n distinct values the fitted
    populations are within one of n/100 each.
    """
    values = np.asarray(list(costs), dtype=np.float64)
    n = values.size
    if n < N_COST_BINS:
        raise ValueError(f"need at least {N_COST_BINS} cost observations to fit "
                         f"{N_COST_BINS} bins, got {n}")
    if np.any(~np.isfinite(values)) or np.any(values < 0):
        raise ValueError("costs must be finite and non-negative")
    ordered = np.sort(values)
    edges = np.empty(N_COST_BINS + 1, dtype=np.float64)
    edges[0] = ordered[0]
    edges[N_COST_BINS] = ordered[-1]
    for i in range(1, N_COST_BINS):
        edges[i] = ordered[(i * n) // N_COST_BINS]
    return CostBinner(edges, n)


# ---------------------------------------------------------------------------
# age grouping


@dataclass(frozen=True)
class AgeGrouper:
    """Pediatric-leaning age bands: 0-2, 2-5, 5-8, 8-12, then widening."""

    boundaries: tuple[int, ...] = (2, 5, 8, 12, 18, 30, 50)

    def __post_init__(self) -> None:
        b = self.boundaries
        if any(x >= y for x, y in zip(b, b[1:])) or not b or b[0] <= 0 or b[-1] >= 120:
            raise ValueError(f"age boundaries must be strictly increasing within (0, 120), "
                             f"got {b}")

    @property
    def n_groups(self) -> int:
        return len(self.boundaries) + 1

    def group_of(self, age_years: int) -> int:
        return int(np.searchsorted(self.boundaries, age_years, side="right"))


DEFAULT_AGE_GROUPER = AgeGrouper()


# ---------------------------------------------------------------------------
# sinusoidal position-style encoding


@functools.lru_cache(maxsize=8192)
def _sinusoid_cached(index: int, d: int) -> np.ndarray:
    half = d // 2
    i = np.arange(half, dtype=np.float64)
    angles = index / np.power(10000.0, 2.0 * i / d)
    out = np.empty(d, dtype=np.float64)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    out.flags.writeable = False
    return out


def sinusoid_embed(index: int, d: int) -> np.ndarray:
    """Fixed encoding: out[2i] = sin(index / 10000^(2i/d)), out[2i+1] the cosine."""
    if d % 2 != 0 or d <= 0:
        raise ValueError(f"embedding dimension must be a positive even number, got {d}")
    if index < 0:
        raise ValueError(f"index must be non-negative, got {index}")
    return _sinusoid_cached(int(index), int(d))


# ---------------------------------------------------------------------------
# learned tables


def _uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    return rng.uniform(-TABLE_INIT_RANGE, TABLE_INIT_RANGE, size=shape)


class EmbeddingTables:
    """All lookup tables: per-modality codes, categories, utilization,
    gender, and age group.

    With category concatenation on, code rows are d/2 wide and get paired
    with their category's d/2 row; without it (the P-TMAE ablation) code
    rows are full width and the category table does not exist.
    """

    def __init__(self, d: int, n_diag: int, n_proc: int, n_drug: int,
                 n_categories: int, n_age_groups: int,
                 use_category_concat: bool = True,
                 learned_date_cost: bool = False,
                 rng: np.random.Generator | None = None) -> None:
        if d % 2 != 0:
            raise ValueError(f"embedding width must be even, got {d}")
        if rng is None:
            rng = derive_rng(0, "embedding-tables")
        self.d = d
        self.use_category_concat = use_category_concat
        self.learned_date_cost = learned_date_cost
        code_width = d // 2 if use_category_concat else d

        self.code_tables = {
            Modality.DIAG: Parameter("embed.diag", _uniform(rng, (max(n_diag, 1), code_width))),
            Modality.PROC: Parameter("embed.proc", _uniform(rng, (max(n_proc, 1), code_width))),
            Modality.DRUG: Parameter("embed.drug", _uniform(rng, (max(n_drug, 1), code_width))),
        }
        self.category = (Parameter("embed.category",
                                   _uniform(rng, (max(n_categories, 1), d // 2)))
                         if use_category_concat else None)
        self.util = Parameter("embed.util", _uniform(rng, (3, d)))
        self.gender = Parameter("embed.gender", _uniform(rng, (2, d // 2)))
        self.age = Parameter("embed.age", _uniform(rng, (n_age_groups, d // 2)))
        self.date_table = (Parameter("embed.date", _uniform(rng, (MAX_DATE + 1, d)))
                           if learned_date_cost else None)
        self.cost_table = (Parameter("embed.cost", _uniform(rng, (N_COST_BINS, d)))
                           if learned_date_cost else None)

    def parameters(self) -> list[Parameter]:
        params = [self.code_tables[m] for m in Modality]
        for p in (self.category, self.util, self.gender, self.age,
                  self.date_table, self.cost_table):
            if p is not None:
                params.append(p)
        return params


def embed_code(code_index: int, category_index: int, tables: EmbeddingTables,
               modality: Modality) -> Tensor:
    """Embedding of one code: its own row, plus its category's row when
    category concatenation is on (code half first)."""
    table = tables.code_tables[modality]
    if not 0 <= code_index < table.shape[0]:
        raise IndexError(f"{modality.value} code index {code_index} out of range")
    if tables.category is None:
        return ad.take_row(table, code_index)
    if not 0 <= category_index < tables.category.shape[0]:
        raise IndexError(f"category index {category_index} out of range")
    return ad.concat_vecs([ad.take_row(table, code_index),
                           ad.take_row(tables.category, category_index)])


def _code_block(tables: EmbeddingTables, modality: Modality,
                code_idx: Sequence[int], cat_idx: Sequence[int]) -> Tensor:
    rows = ad.gather_rows(tables.code_tables[modality], code_idx)
    if tables.category is None:
        return rows
    return ad.concat_cols([rows, ad.gather_rows(tables.category, cat_idx)])


def _date_row(tables: EmbeddingTables, date: int) -> Tensor:
    if tables.date_table is not None:
        return ad.gather_rows(tables.date_table, [date])
    return Tensor(sinusoid_embed(date, tables.d).reshape(1, -1))


def _cost_row(tables: EmbeddingTables, cost_bin: int) -> Tensor:
    if tables.cost_table is not None:
        return ad.gather_rows(tables.cost_table, [cost_bin])
    return Tensor(sinusoid_embed(cost_bin, tables.d).reshape(1, -1))


def build_visit_matrix(encoded: EncodedVisit, tables: EmbeddingTables,
                       binner: CostBinner,
                       category_indices: dict | None = None,
                       cost_bin: int | None = None) -> Tensor:
    """Stack one visit's embedding rows: codes, utilization, date, cost.

    ``category_indices`` maps modality to the per-code category indices
    (same order as the encoded index lists); required when category
    concatenation is on. Row count is j + k + l + 3.
    """
    parts = []
    for modality, idx in ((Modality.DIAG, encoded.diag_idx),
                          (Modality.PROC, encoded.proc_idx),
                          (Modality.DRUG, encoded.drug_idx)):
        if idx:
            cats = category_indices[modality] if category_indices else ()
            parts.append(_code_block(tables, modality, list(idx), list(cats)))
    parts.append(ad.gather_rows(tables.util, [encoded.util_index]))
    parts.append(_date_row(tables, encoded.date))
    if cost_bin is None:
        cost_bin = binner.bin_of(encoded.cost)
    parts.append(_cost_row(tables, cost_bin))
    return ad.concat_rows(parts)


def pool_visit(visit_matrix: Tensor) -> Tensor:
    """Max-pool the visit matrix into one fixed-width visit vector."""
    return ad.max_pool_rows(visit_matrix)


def embed_demographics(demo: Demographics, tables: EmbeddingTables,
                       grouper: AgeGrouper = DEFAULT_AGE_GROUPER) -> Tensor:
    """One d-wide token: age-group half and gender half, concatenated."""
    age_idx = grouper.group_of(demo.age_years)
    gender_idx = 0 if demo.gender == "F" else 1
    return ad.concat_vecs([ad.take_row(tables.age, age_idx),
                           ad.take_row(tables.gender, gender_idx)])


# ---------------------------------------------------------------------------
# co-occurrence pretraining (skip-gram with negative sampling)


def _sgns_train(pairs: np.ndarray, vocab_size: int, dim: int, epochs: int,
                rng: np.random.Generator, counts: np.ndarray,
                lr: float = 0.05, negatives: int = 5) -> np.ndarray:
    """Plain-numpy skip-gram over (center, context) index pairs."""
    in_vecs = rng.uniform(-TABLE_INIT_RANGE, TABLE_INIT_RANGE, size=(vocab_size, dim))
    out_vecs = np.zeros((vocab_size, dim))
    if pairs.size == 0:
        return in_vecs
    freq = counts.astype(np.float64) ** 0.75
    freq /= freq.sum()
    n_pairs = pairs.shape[0]
    total = epochs * n_pairs
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n_pairs)
        negs = rng.choice(vocab_size, size=(n_pairs, negatives), p=freq)
        for row, pair_i in enumerate(order):
            center, context = pairs[pair_i]
            cur_lr = lr * (1.0 - step / total)
            step += 1
            v = in_vecs[center]
            targets = np.concatenate(([context], negs[row]))
            labels = np.zeros(negatives + 1)
            labels[0] = 1.0
            u = out_vecs[targets]
            x = u @ v
            scores = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                              np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            g = (scores - labels) * cur_lr
            in_vecs[center] = v - g @ u
            out_vecs[targets] -= np.outer(g, v)
    return in_vecs


def pretrain_code_embeddings(records: Sequence[PatientRecord], vocab: CodeVocabulary,
                             dim: int, epochs: int, seed: int,
                             category_dim: int | None = None):
    """Initialize code (and category) vectors from within-visit co-occurrence.

    Returns ``(code_vectors, category_vectors)`` where ``code_vectors`` maps
    each modality to a ``(size, dim)`` array. With ``epochs == 0`` returns
    ``(None, None)``: the caller keeps its uniform initialization, which is
    exactly the disabled path.
    """
    if epochs == 0:
        return None, None
    if category_dim is None:
        category_dim = dim
    offsets = {Modality.DIAG: 0, Modality.PROC: vocab.n_diag,
               Modality.DRUG: vocab.n_diag + vocab.n_proc}
    total = vocab.total_codes

    code_pairs: list[tuple[int, int]] = []
    cat_pairs: list[tuple[int, int]] = []
    code_counts = np.zeros(total, dtype=np.int64)
    cat_counts = np.zeros(max(vocab.n_categories, 1), dtype=np.int64)
    for record in records:
        for visit in record.visits:
            joint = []
            cats = set()
            for modality in Modality:
                for code in visit.codes(modality):
                    joint.append(offsets[modality] + vocab.index_of(modality, code))
                    cats.add(vocab.category_index_of(modality, code))
            for idx in joint:
                code_counts[idx] += 1
            cat_list = sorted(cats)
            for c in cat_list:
                cat_counts[c] += 1
            for a in joint:
                for b in joint:
                    if a != b:
                        code_pairs.append((a, b))
            for a in cat_list:
                for b in cat_list:
                    if a != b:
                        cat_pairs.append((a, b))

    code_counts = np.maximum(code_counts, 1)
    cat_counts = np.maximum(cat_counts, 1)
    rng = derive_rng(seed, "pretrain:codes")
    joint_vecs = _sgns_train(np.asarray(code_pairs, dtype=np.intp).reshape(-1, 2),
                             total, dim, epochs, rng, code_counts)
    code_vectors = {
        Modality.DIAG: joint_vecs[0:vocab.n_diag],
        Modality.PROC: joint_vecs[vocab.n_diag:vocab.n_diag + vocab.n_proc],
        Modality.DRUG: joint_vecs[vocab.n_diag + vocab.n_proc:total],
    }
    rng_cat = derive_rng(seed, "pretrain:categories")
    category_vectors = _sgns_train(np.asarray(cat_pairs, dtype=np.intp).reshape(-1, 2),
                                   max(vocab.n_categories, 1), category_dim, epochs,
                                   rng_cat, cat_counts)
    return code_vectors, category_vectors
