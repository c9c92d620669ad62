"""Cost binning, sinusoids, code/demographic embeddings, pooling, pretraining."""

import math

import numpy as np
import pytest

from tmae import autodiff as ad
from tmae.autodiff import Tensor
from tmae.claims import (
    Demographics,
    EncodedVisit,
    Modality,
    Visit,
    build_vocabulary,
    clean_record,
    encode_visit,
)
from tmae.embeddings import (
    AgeGrouper,
    CostBinner,
    DEFAULT_AGE_GROUPER,
    EmbeddingTables,
    build_visit_matrix,
    embed_code,
    embed_demographics,
    fit_cost_bins,
    pool_visit,
    pretrain_code_embeddings,
    sinusoid_embed,
)
from tmae.seeding import derive_rng


def quantile_oracle_bins(values, query):
    """Independent oracle: sort the fitting data, count how many of the 99
    interior order statistics are <= the query."""
    ordered = sorted(values)
    n = len(ordered)
    edges = [ordered[(i * n) // 100] for i in range(1, 100)]
    return sum(1 for e in edges if e <= query)


class TestCostBinner:
    def test_against_sorting_oracle(self):
        values = [float(v) for v in range(1000)]
        binner = fit_cost_bins(values)
        for query in (5.0, 995.0, 10.0, 123.0, 999.0, 0.0):
            assert binner.bin_of(query) == quantile_oracle_bins(values, query)

    def test_stated_examples(self):
        binner = fit_cost_bins([float(v) for v in range(1000)])
        assert binner.bin_of(5.0) == 0
        assert binner.bin_of(995.0) == 99

    def test_clamp_contract(self):
        binner = fit_cost_bins([float(v) for v in range(1000)])
        assert binner.bin_of(9990.0) == 99
        assert binner.bin_of(-5.0) == 0

    def test_all_equal_collapses_to_bin_zero(self):
        binner = fit_cost_bins([42.0] * 500)
        assert np.all(np.diff(binner.edges) == 0)
        for query in (0.0, 42.0, 420.0):
            assert binner.bin_of(query) == 0

    def test_population_balance(self):
        rng = np.random.default_rng(0)
        values = rng.uniform(0, 1e4, size=1500)
        values = np.unique(values)  # distinct with probability 1
        assert values.size >= 1000
        binner = fit_cost_bins(values)
        bins = binner.bins_of(values)
        counts = np.bincount(bins, minlength=100)
        target = values.size / 100
        assert np.all(np.abs(counts - target) <= 1.0)

    def test_thousand_distinct_populations_10pm1(self):
        values = np.arange(1000, dtype=np.float64) * 3.7
        binner = fit_cost_bins(values)
        counts = np.bincount(binner.bins_of(values), minlength=100)
        assert np.all(np.abs(counts - 10) <= 1)

    def test_too_few_observations(self):
        with pytest.raises(ValueError, match="at least 100"):
            fit_cost_bins([1.0] * 99)

    def test_serialization_round_trip(self):
        binner = fit_cost_bins(np.arange(500, dtype=np.float64))
        clone = CostBinner(binner.edges.copy(), binner.fitted_on)
        queries = np.linspace(-10, 600, 77)
        np.testing.assert_array_equal(binner.bins_of(queries), clone.bins_of(queries))


class TestSinusoid:
    def test_index_zero_alternates(self):
        out = sinusoid_embed(0, 8)
        np.testing.assert_array_equal(out, [0, 1, 0, 1, 0, 1, 0, 1])

    def test_index_one_d2(self):
        out = sinusoid_embed(1, 2)
        assert out[0] == pytest.approx(math.sin(1.0), abs=1e-12)
        assert out[1] == pytest.approx(math.cos(1.0), abs=1e-12)

    def test_index_one_d4_slot2(self):
        out = sinusoid_embed(1, 4)
        assert out[2] == pytest.approx(math.sin(1.0 / math.sqrt(10000.0)), abs=1e-12)
        assert out[2] == pytest.approx(0.0099998, abs=1e-6)

    def test_bounded(self):
        for idx in (0, 1, 17, 365):
            assert np.all(np.abs(sinusoid_embed(idx, 16)) <= 1.0)

    def test_injective_over_dates_at_d8(self):
        seen = {tuple(sinusoid_embed(i, 8)) for i in range(366)}
        assert len(seen) == 366

    def test_odd_d_rejected(self):
        with pytest.raises(ValueError):
            sinusoid_embed(3, 7)


class TestAgeGrouper:
    def test_bands(self):
        g = DEFAULT_AGE_GROUPER
        assert g.group_of(0) == 0
        assert g.group_of(2) == 1
        assert g.group_of(6) == 2  # the 5-8 band
        assert g.group_of(10) == 3
        assert g.group_of(120) == g.n_groups - 1

    def test_validation(self):
        with pytest.raises(ValueError):
            AgeGrouper((5, 5, 8))


def tiny_tables(d=8, use_category_concat=True, **kwargs):
    rng = derive_rng(3, "test-tables")
    return EmbeddingTables(d, n_diag=4, n_proc=3, n_drug=2, n_categories=3,
                           n_age_groups=DEFAULT_AGE_GROUPER.n_groups,
                           use_category_concat=use_category_concat, rng=rng, **kwargs)


class TestEmbedCode:
    def test_zero_tables_zero_vector(self):
        tables = tiny_tables()
        for p in tables.parameters():
            p.data[...] = 0.0
        out = embed_code(1, 2, tables, Modality.DIAG)
        np.testing.assert_array_equal(out.data, np.zeros(8))

    def test_shared_category_half_identical(self):
        tables = tiny_tables()
        a = embed_code(0, 1, tables, Modality.DIAG).data
        b = embed_code(3, 1, tables, Modality.DIAG).data
        np.testing.assert_array_equal(a[4:], b[4:])
        assert not np.array_equal(a[:4], b[:4])

    def test_code_half_is_table_row(self):
        tables = tiny_tables()
        out = embed_code(2, 0, tables, Modality.PROC).data
        np.testing.assert_array_equal(out[:4], tables.code_tables[Modality.PROC].data[2])

    def test_category_off_full_width(self):
        tables = tiny_tables(use_category_concat=False)
        out = embed_code(1, 0, tables, Modality.DRUG).data
        assert out.shape == (8,)
        np.testing.assert_array_equal(out, tables.code_tables[Modality.DRUG].data[1])

    def test_out_of_range(self):
        tables = tiny_tables()
        with pytest.raises(IndexError):
            embed_code(99, 0, tables, Modality.DIAG)


def encoded(diag=(), proc=(), drug=(), util=1, date=10, cost=5.0):
    return EncodedVisit(tuple(diag), tuple(proc), tuple(drug), util, date, cost)


def cats_for(ev):
    # category index 0 for every code, enough for shape checks
    return {Modality.DIAG: tuple(0 for _ in ev.diag_idx),
            Modality.PROC: tuple(0 for _ in ev.proc_idx),
            Modality.DRUG: tuple(0 for _ in ev.drug_idx)}


@pytest.fixture
def binner():
    return fit_cost_bins(np.linspace(0, 1000, 200))


class TestVisitMatrix:
    def test_row_count(self, binner):
        tables = tiny_tables()
        ev = encoded(diag=(0,), drug=(1,))
        matrix = build_visit_matrix(ev, tables, binner, cats_for(ev))
        assert matrix.shape == (5, 8)  # 1 diag + 1 drug + util + date + cost

    def test_date_changes_only_date_row(self, binner):
        tables = tiny_tables()
        ev1 = encoded(diag=(0, 1), date=10)
        ev2 = encoded(diag=(0, 1), date=200)
        m1 = build_visit_matrix(ev1, tables, binner, cats_for(ev1)).data
        m2 = build_visit_matrix(ev2, tables, binner, cats_for(ev2)).data
        diff_rows = np.flatnonzero(np.any(m1 != m2, axis=1))
        assert diff_rows.tolist() == [3]  # rows: diag, diag, util, date, cost

    def test_claim_type_changes_only_util_row(self, binner):
        tables = tiny_tables()
        ev_ip = encoded(diag=(0,), util=0)
        ev_rx = encoded(diag=(0,), util=2)
        m1 = build_visit_matrix(ev_ip, tables, binner, cats_for(ev_ip)).data
        m2 = build_visit_matrix(ev_rx, tables, binner, cats_for(ev_rx)).data
        diff_rows = np.flatnonzero(np.any(m1 != m2, axis=1))
        assert diff_rows.tolist() == [1]

    def test_learned_date_cost_tables(self, binner):
        tables = tiny_tables(learned_date_cost=True)
        ev = encoded(diag=(0,))
        matrix = build_visit_matrix(ev, tables, binner, cats_for(ev))
        np.testing.assert_array_equal(matrix.data[2], tables.date_table.data[10])


class TestPoolVisit:
    def test_single_row_identity(self):
        row = Tensor([[1.0, -2.0, 3.0]])
        np.testing.assert_array_equal(pool_visit(row).data, [1.0, -2.0, 3.0])

    def test_permutation_invariant(self):
        rng = np.random.default_rng(5)
        matrix = rng.normal(size=(7, 6))
        base = pool_visit(Tensor(matrix)).data
        for _ in range(100):
            perm = rng.permutation(7)
            out = pool_visit(Tensor(matrix[perm])).data
            np.testing.assert_array_equal(out, base)

    def test_output_width_fixed(self):
        rng = np.random.default_rng(6)
        for rows in (5, 50):
            out = pool_visit(Tensor(rng.normal(size=(rows, 8))))
            assert out.shape == (8,)


class TestDemographics:
    def test_age_band_and_determinism(self):
        tables = tiny_tables()
        a = embed_demographics(Demographics(6, "F"), tables).data
        b = embed_demographics(Demographics(7, "F"), tables).data  # same 5-8 band
        np.testing.assert_array_equal(a, b)

    def test_zero_tables(self):
        tables = tiny_tables()
        tables.age.data[...] = 0.0
        tables.gender.data[...] = 0.0
        out = embed_demographics(Demographics(6, "M"), tables).data
        np.testing.assert_array_equal(out, np.zeros(8))

    def test_gender_changes_half(self):
        tables = tiny_tables()
        f = embed_demographics(Demographics(6, "F"), tables).data
        m = embed_demographics(Demographics(6, "M"), tables).data
        np.testing.assert_array_equal(f[:4], m[:4])
        assert not np.array_equal(f[4:], m[4:])


class TestPretraining:
    def three_code_corpus(self):
        # A and B always co-occur; C always alone.
        raws = []
        for i in range(30):
            visits = [{"date": 1, "type": "OP", "diag": ["A", "B"], "cost": 1.0},
                      {"date": 2, "type": "OP", "diag": ["C"], "cost": 1.0}]
            raws.append({"patient_id": f"p{i}", "age": 5, "gender": "F",
                         "visits": visits})
        records = [clean_record(r) for r in raws]
        category_map = {(Modality.DIAG, "A"): "c1", (Modality.DIAG, "B"): "c1",
                        (Modality.DIAG, "C"): "c2"}
        return records, build_vocabulary(records, category_map)

    def test_cooccurring_codes_more_similar(self):
        records, vocab = self.three_code_corpus()
        code_vecs, _ = pretrain_code_embeddings(records, vocab, dim=8, epochs=10, seed=1)
        diag = code_vecs[Modality.DIAG]

        def cosine(u, v):
            return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))

        a, b, c = (diag[vocab.index_of(Modality.DIAG, x)] for x in "ABC")
        assert cosine(a, b) > cosine(a, c)
        assert cosine(a, b) > cosine(b, c)

    def test_epochs_zero_is_disabled(self):
        records, vocab = self.three_code_corpus()
        assert pretrain_code_embeddings(records, vocab, 8, 0, seed=1) == (None, None)

    def test_deterministic(self):
        records, vocab = self.three_code_corpus()
        a, _ = pretrain_code_embeddings(records, vocab, 8, 2, seed=9)
        b, _ = pretrain_code_embeddings(records, vocab, 8, 2, seed=9)
        for modality in Modality:
            np.testing.assert_array_equal(a[modality], b[modality])
