"""Training loop determinism, optimizer behavior, abort handling, checkpoints."""

import numpy as np
import pytest

from tmae.autodiff import Parameter
from tmae.claims import Modality, build_vocabulary, clean_record
from tmae.network import ModelConfig
from tmae.training import (
    Adam,
    CheckpointConfigError,
    CheckpointError,
    CheckpointFingerprintError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ModelState,
    TrainConfig,
    TrainingAbort,
    embed_records,
    load_checkpoint,
    patient_embedding,
    save_checkpoint,
    train,
    train_variant,
    write_history_csv,
)

CATEGORY_MAP = {
    (Modality.DIAG, "A"): "c1", (Modality.DIAG, "B"): "c1",
    (Modality.DIAG, "C"): "c2",
    (Modality.DRUG, "X"): "c3", (Modality.DRUG, "Y"): "c3",
}


def synthetic_records(n=8, visits_each=15, seed=0):
    rng = np.random.default_rng(seed)
    raws = []
    for i in range(n):
        visits = []
        dates = np.sort(rng.integers(0, 366, size=visits_each))
        for t in range(visits_each):
            claim_type = ["IP", "OP", "RX"][int(rng.integers(3))]
            visits.append({
                "date": int(dates[t]),
                "type": claim_type,
                "diag": list(rng.choice(["A", "B", "C"], size=int(rng.integers(1, 3)),
                                        replace=False)),
                "drug": [["X", "Y"][int(rng.integers(2))]] if claim_type == "RX" else [],
                "cost": float(np.round(rng.uniform(5, 500), 2)),
            })
        raws.append({"patient_id": f"s{i}", "age": int(rng.integers(1, 18)),
                     "gender": "F" if rng.random() < 0.5 else "M", "visits": visits})
    return [clean_record(r) for r in raws]


MODEL_CFG = ModelConfig(d=8, heads=2, ff_width=16)


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = Parameter("p", [1.0, -2.0, 3.0])
        before = p.data.copy()
        opt = Adam([p], lr=0.1)
        opt.zero_grad()
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_moves_against_gradient(self):
        p = Parameter("p", [1.0])
        opt = Adam([p], lr=0.1)
        p.grad[...] = 2.0
        opt.step()
        assert p.data[0] < 1.0


class TestTrain:
    def test_lr_zero_keeps_parameters_bitwise(self):
        records = synthetic_records(n=1, visits_each=110)
        cfg = TrainConfig(epochs=1, batch_size=1, learning_rate=0.0, seed=3)
        state, history = train(records, CATEGORY_MAP, MODEL_CFG, cfg)
        from tmae.network import TmaeNetwork

        fresh = TmaeNetwork(MODEL_CFG, state.vocab, state.grouper, seed=3)
        for trained, init in zip(state.network.parameters(), fresh.parameters()):
            np.testing.assert_array_equal(trained.data, init.data)
        assert len(history) == 1

    def test_determinism(self):
        records = synthetic_records(n=8)
        cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=0.05, seed=5)
        _, h1 = train(records, CATEGORY_MAP, MODEL_CFG, cfg)
        _, h2 = train(records, CATEGORY_MAP, MODEL_CFG, cfg)
        assert [(r.step, r.l_loss, r.l_code, r.l_cost) for r in h1] \
            == [(r.step, r.l_loss, r.l_code, r.l_cost) for r in h2]

    def test_loss_decreases_on_tiny_problem(self):
        records = synthetic_records(n=8)
        cfg = TrainConfig(epochs=30, batch_size=8, learning_rate=1.0, seed=7,
                          log_every=0)
        _, history = train(records, CATEGORY_MAP, MODEL_CFG, cfg)
        assert history[-1].l_loss < history[0].l_loss
        assert all(np.isfinite(r.l_loss) for r in history)

    def test_max_steps(self):
        records = synthetic_records(n=8)
        cfg = TrainConfig(epochs=50, batch_size=2, learning_rate=0.01, seed=1,
                          max_steps=5)
        _, history = train(records, CATEGORY_MAP, MODEL_CFG, cfg)
        assert len(history) == 5

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train([], CATEGORY_MAP, MODEL_CFG, TrainConfig())

    def test_nan_aborts_with_step_and_last_good(self):
        records = synthetic_records(n=4, visits_each=30)
        cfg = TrainConfig(epochs=1, batch_size=4, learning_rate=0.01, seed=2,
                          max_steps=1)
        state, _ = train(records, CATEGORY_MAP, MODEL_CFG, cfg)
        state.network.parameters()[0].data[0, 0] = np.nan  # simulate corruption
        resume_cfg = TrainConfig(epochs=1, batch_size=4, learning_rate=0.01, seed=2)
        with np.errstate(all="ignore"):
            with pytest.raises(TrainingAbort) as info:
                train(records, CATEGORY_MAP, MODEL_CFG, resume_cfg, resume_from=state)
        assert info.value.step == 1
        assert isinstance(info.value.last_good, ModelState)
        assert all(np.all(np.isfinite(p.data)) or True
                   for p in info.value.last_good.network.parameters())

    def test_variants_all_train(self):
        records = synthetic_records(n=6, visits_each=20)
        cfg = TrainConfig(epochs=1, batch_size=3, learning_rate=0.01, seed=4)
        for variant in ("tmae", "p-tmae", "c-tmae"):
            state, history = train_variant(variant, records, CATEGORY_MAP, MODEL_CFG, cfg)
            assert all(np.isfinite(r.l_loss) for r in history)
            if variant == "p-tmae":
                assert state.network.tables.category is None
            if variant == "c-tmae":
                assert not state.config.use_cost_loss

    def test_pretraining_path_is_deterministic(self):
        records = synthetic_records(n=6, visits_each=20)
        cfg = TrainConfig(epochs=1, batch_size=6, learning_rate=0.01, seed=8,
                          pretrain_embeddings=True, pretrain_epochs=2)
        s1, _ = train(records, CATEGORY_MAP, MODEL_CFG, cfg)
        s2, _ = train(records, CATEGORY_MAP, MODEL_CFG, cfg)
        for p1, p2 in zip(s1.network.parameters(), s2.network.parameters()):
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_sgd_option(self):
        records = synthetic_records(n=4, visits_each=30)
        cfg = TrainConfig(epochs=1, batch_size=4, learning_rate=1e-4, seed=9,
                          optimizer="sgd")
        _, history = train(records, CATEGORY_MAP, MODEL_CFG, cfg)
        assert np.isfinite(history[-1].l_loss)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(optimizer="lion")


@pytest.fixture(scope="module")
def trained_for_embedding():
    records = synthetic_records(n=6, visits_each=20)
    cfg = TrainConfig(epochs=1, batch_size=3, learning_rate=0.05, seed=6)
    state, _ = train(records, CATEGORY_MAP, MODEL_CFG, cfg)
    return records, state


class TestEmbedding:
    @pytest.fixture
    def trained(self, trained_for_embedding):
        return trained_for_embedding

    def test_deterministic_embedding(self, trained):
        records, state = trained
        a = patient_embedding(records[0], state)
        b = patient_embedding(records[0], state)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (MODEL_CFG.d,)

    def test_batch_matches_single(self, trained):
        records, state = trained
        ids, matrix = embed_records(records, state)
        assert ids == [r.patient_id for r in records]
        np.testing.assert_array_equal(matrix[0], patient_embedding(records[0], state))

    def test_cost_bin_change_moves_embedding(self, trained):
        records, state = trained
        import dataclasses

        record = records[0]
        visit = record.visits[0]
        moved_visit = dataclasses.replace(visit, cost=visit.cost + 100000.0)
        moved = dataclasses.replace(record, visits=(moved_visit,) + record.visits[1:])
        assert state.binner.bin_of(moved_visit.cost) != state.binner.bin_of(visit.cost)
        a = patient_embedding(record, state)
        b = patient_embedding(moved, state)
        assert np.linalg.norm(a - b) > 1e-9


@pytest.fixture(scope="module")
def trained_with_checkpoint(tmp_path_factory):
    records = synthetic_records(n=6, visits_each=20)
    cfg = TrainConfig(epochs=1, batch_size=3, learning_rate=0.05, seed=10)
    state, history = train(records, CATEGORY_MAP, MODEL_CFG, cfg)
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    save_checkpoint(state, path)
    return records, state, history, path


class TestCheckpoint:
    @pytest.fixture
    def trained(self, trained_with_checkpoint):
        return trained_with_checkpoint

    def test_round_trip_bit_exact_embeddings(self, trained):
        records, state, _, path = trained
        loaded = load_checkpoint(path)
        rng = np.random.default_rng(0)
        for idx in rng.integers(0, len(records), size=10):
            a = patient_embedding(records[idx], state)
            b = patient_embedding(records[idx], loaded)
            np.testing.assert_array_equal(a, b)

    def test_round_trip_parameters_bitwise(self, trained):
        _, state, _, path = trained
        loaded = load_checkpoint(path)
        src = state.network.param_dict()
        for name, p in loaded.network.param_dict().items():
            np.testing.assert_array_equal(p.data, src[name].data)

    def test_magic_and_version(self, trained, tmp_path):
        _, _, _, path = trained
        blob = path.read_bytes()
        assert blob[:4] == b"TMAE"
        bad = tmp_path / "bad_version.ckpt"
        bad.write_bytes(blob[:4] + (99).to_bytes(4, "little") + blob[8:])
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(bad)

    def test_truncated_file(self, trained, tmp_path):
        _, _, _, path = trained
        blob = path.read_bytes()
        for cut in (8, len(blob) // 2, len(blob) - 16):
            part = tmp_path / f"cut{cut}.ckpt"
            part.write_bytes(blob[:cut])
            with pytest.raises(CheckpointTruncatedError, match="truncated"):
                load_checkpoint(part)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "garbage.ckpt"
        path.write_bytes(b"GARBAGE-GARBAGE-GARBAGE")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_fingerprint_mismatch(self, trained):
        records, _, _, path = trained
        renamed = {key: f"other-{cat}" for key, cat in CATEGORY_MAP.items()}
        other_vocab = build_vocabulary(records, renamed)
        with pytest.raises(CheckpointFingerprintError):
            load_checkpoint(path, vocabulary=other_vocab)

    def test_fingerprint_match_accepts(self, trained):
        records, state, _, path = trained
        vocab = build_vocabulary(records, CATEGORY_MAP)
        loaded = load_checkpoint(path, vocabulary=vocab)
        assert loaded.fingerprint == state.fingerprint

    def test_config_mismatch(self, trained):
        _, _, _, path = trained
        with pytest.raises(CheckpointConfigError):
            load_checkpoint(path, expected_config=ModelConfig(d=64, heads=4))

    def test_history_csv(self, trained, tmp_path):
        _, _, history, _ = trained
        path = tmp_path / "history.csv"
        write_history_csv(history, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "step,l_loss,l_code,l_cost"
        assert len(lines) == len(history) + 1
