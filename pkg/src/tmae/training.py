"""Mini-batch training, ablation variants, checkpointing, and embedding
extraction.

Training is deterministic: the single seed drives parameter initialization,
shuffling, and optional embedding pretraining through independent derived
streams. The checkpoint is self-contained (parameters, config, vocabulary,
cost-bin edges), so a loaded model can embed records with no other inputs.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape
from .claims import CategoryMap, CodeVocabulary, Modality, PatientRecord, build_vocabulary
from .embeddings import (
    AgeGrouper,
    CostBinner,
    DEFAULT_AGE_GROUPER,
    fit_cost_bins,
    pretrain_code_embeddings,
)
from .network import (
    ModelConfig,
    TmaeNetwork,
    apply_variant,
    batch_loss,
    category_lookup,
    clone_network,
    encode_prepared,
    prepare_patient,
)
from .seeding import derive_rng

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TMAE"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Base for all checkpoint load failures."""


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointFingerprintError(CheckpointError):
    pass


class CheckpointConfigError(CheckpointError):
    pass


class TrainingAbort(RuntimeError):
    """Loss went non-finite; carries the step and the last good state."""

    def __init__(self, step: int, last_good: "ModelState") -> None:
        self.step = step
        self.last_good = last_good
        super().__init__(f"non-finite loss at step {step}; last good state attached")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    pretrain_embeddings: bool = False
    pretrain_epochs: int = 3
    log_every: int = 10
    max_steps: int | None = None
    optimizer: str = "adam"
    holdout: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        # zero is allowed so a no-op training run stays expressible
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError(f"holdout must be in [0, 1), got {self.holdout}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")


@dataclass
class HistoryRow:
    step: int
    l_loss: float
    l_code: float
    l_cost: float


@dataclass
class ModelState:
    """A trained (or initialized) model: parameters plus everything needed
    to embed a record."""

    network: TmaeNetwork
    config: ModelConfig
    binner: CostBinner
    vocab: CodeVocabulary
    grouper: AgeGrouper
    fingerprint: str
    metadata: dict = field(default_factory=dict)

    def clone(self) -> "ModelState":
        return ModelState(clone_network(self.network, self.vocab), self.config,
                          self.binner, self.vocab, self.grouper, self.fingerprint,
                          dict(self.metadata))


class Adam:
    """First-order optimizer with momentum and per-coordinate adaptivity."""

    def __init__(self, params: Sequence[Parameter], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class Sgd:
    def __init__(self, params: Sequence[Parameter], lr: float) -> None:
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            p.data -= self.lr * p.grad


def _make_optimizer(cfg: TrainConfig, params: Sequence[Parameter]):
    if cfg.optimizer == "sgd":
        return Sgd(params, cfg.learning_rate)
    return Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)


def train(records: Sequence[PatientRecord], category_map: CategoryMap,
          model_cfg: ModelConfig, train_cfg: TrainConfig,
          grouper: AgeGrouper = DEFAULT_AGE_GROUPER,
          resume_from: ModelState | None = None):
    """Train on the records and return ``(ModelState, history)``.

    The cost binner is fitted on all training visit costs (so the dataset
    needs at least 100 visits in total). A non-finite loss aborts with
    :class:`TrainingAbort` carrying the step number and last good state.
    """
    if not records:
        raise ValueError("training dataset is empty")

    if resume_from is not None:
        state = resume_from.clone()
        vocab, binner, network = state.vocab, state.binner, state.network
        model_cfg = state.config
    else:
        vocab = build_vocabulary(records, category_map)
        binner = fit_cost_bins([v.cost for r in records for v in r.visits])
        network = TmaeNetwork(model_cfg, vocab, grouper, seed=train_cfg.seed)
        if train_cfg.pretrain_embeddings and train_cfg.pretrain_epochs > 0:
            code_width = model_cfg.d // 2 if model_cfg.use_category_concat else model_cfg.d
            code_vecs, cat_vecs = pretrain_code_embeddings(
                records, vocab, code_width, train_cfg.pretrain_epochs, train_cfg.seed,
                category_dim=model_cfg.d // 2)
            if code_vecs is not None:
                for modality in Modality:
                    table = network.tables.code_tables[modality]
                    rows = code_vecs[modality]
                    if rows.shape[0]:
                        table.data[:rows.shape[0]] = rows
                if network.tables.category is not None:
                    network.tables.category.data[:cat_vecs.shape[0]] = cat_vecs
        state = ModelState(network, model_cfg, binner, vocab, grouper,
                           vocab.fingerprint(), {})

    lookup = category_lookup(vocab)
    preps = [prepare_patient(r, vocab, binner, grouper, lookup) for r in records]
    holdout_preps: list = []
    if train_cfg.holdout > 0.0 and len(preps) > 1:
        n_holdout = max(1, int(len(preps) * train_cfg.holdout))
        rng = derive_rng(train_cfg.seed, "holdout")
        order = rng.permutation(len(preps))
        holdout_preps = [preps[i] for i in order[:n_holdout]]
        preps = [preps[i] for i in order[n_holdout:]]

    cost_scale = 1.0
    if model_cfg.scale_cost_targets:
        cost_scale = max(float(np.mean(np.concatenate([p.costs for p in preps]))), 1e-9)

    optimizer = _make_optimizer(train_cfg, network.parameters())
    history: list[HistoryRow] = []
    last_good = state.clone()
    step = 0
    balance_checked = False
    done = False

    for epoch in range(train_cfg.epochs):
        if train_cfg.shuffle:
            order = derive_rng(train_cfg.seed, f"shuffle:{epoch}").permutation(len(preps))
        else:
            order = np.arange(len(preps))
        for start in range(0, len(preps), train_cfg.batch_size):
            batch = [preps[i] for i in order[start:start + train_cfg.batch_size]]
            step += 1
            optimizer.zero_grad()
            with Tape() as tape:
                loss, code_val, cost_val = batch_loss(network, batch, binner, cost_scale)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingAbort(step, last_good)
            # these parameters produced a finite loss; remember them before updating
            for p_src, p_dst in zip(network.parameters(),
                                    last_good.network.parameters()):
                p_dst.data[...] = p_src.data
            ad.backward(loss, tape)
            optimizer.step()
            history.append(HistoryRow(step, loss_val, code_val, cost_val))
            if train_cfg.log_every and step % train_cfg.log_every == 0:
                msg = (f"step {step}: loss={loss_val:.6g} code={code_val:.6g} "
                       f"cost={cost_val:.6g}")
                if holdout_preps:
                    with np.errstate(all="ignore"):
                        h_loss, _, _ = batch_loss(network, holdout_preps, binner,
                                                  cost_scale)
                    msg += f" holdout={float(h_loss.data):.6g}"
                logger.info(msg)
            if step >= 100 and not balance_checked and model_cfg.use_cost_loss:
                balance_checked = True
                weighted_code = model_cfg.code_loss_weight * code_val
                if weighted_code > 0 and cost_val > 0:
                    ratio = max(weighted_code / cost_val, cost_val / weighted_code)
                    if ratio > 100.0:
                        logger.warning(
                            "loss terms are unbalanced after %d steps: "
                            "lambda*L_code=%.3g vs L_cost=%.3g (ratio %.3g); "
                            "consider adjusting lambda", step, weighted_code,
                            cost_val, ratio)
            if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
                done = True
                break
        if done:
            break

    state.metadata.update({
        "steps": step,
        "seed": train_cfg.seed,
        "final_l_loss": history[-1].l_loss if history else None,
        "final_l_code": history[-1].l_code if history else None,
        "final_l_cost": history[-1].l_cost if history else None,
    })
    return state, history


def train_variant(variant: str, records: Sequence[PatientRecord],
                  category_map: CategoryMap, model_cfg: ModelConfig,
                  train_cfg: TrainConfig, grouper: AgeGrouper = DEFAULT_AGE_GROUPER):
    """Train one of tmae / p-tmae / c-tmae with the matching config flags."""
    return train(records, category_map, apply_variant(model_cfg, variant),
                 train_cfg, grouper)


# ---------------------------------------------------------------------------
# embedding extraction


def patient_embedding(record: PatientRecord, state: ModelState) -> np.ndarray:
    """The d-dimensional bottleneck vector for one record (inference only)."""
    prep = prepare_patient(record, state.vocab, state.binner, state.grouper)
    enc = encode_prepared(state.network, prep, state.binner)
    return np.array(enc.pe.data)


def embed_records(records: Sequence[PatientRecord], state: ModelState):
    """Embeddings for many records: (ids, n x d array)."""
    lookup = category_lookup(state.vocab)
    ids = []
    rows = []
    for record in records:
        prep = prepare_patient(record, state.vocab, state.binner, state.grouper, lookup)
        enc = encode_prepared(state.network, prep, state.binner)
        ids.append(record.patient_id)
        rows.append(np.array(enc.pe.data))
    return ids, np.stack(rows)


# ---------------------------------------------------------------------------
# checkpoint format
#
# magic "TMAE" | u32 version | u64 header length | UTF-8 JSON header |
# raw little-endian float64 parameter blobs in manifest order.


def _vocab_to_obj(vocab: CodeVocabulary) -> dict:
    return {
        "diag": vocab.codes_in_order(Modality.DIAG),
        "proc": vocab.codes_in_order(Modality.PROC),
        "drug": vocab.codes_in_order(Modality.DRUG),
        "categories": list(vocab.category_index.keys()),
        "code_categories": {
            m.value: {c: cat for (mm, c), cat in vocab.code_category.items() if mm == m}
            for m in Modality
        },
    }


def _vocab_from_obj(obj: Mapping) -> CodeVocabulary:
    code_index = {
        Modality.DIAG: {c: i for i, c in enumerate(obj["diag"])},
        Modality.PROC: {c: i for i, c in enumerate(obj["proc"])},
        Modality.DRUG: {c: i for i, c in enumerate(obj["drug"])},
    }
    category_index = {c: i for i, c in enumerate(obj["categories"])}
    code_category = {}
    for m_text, mapping in obj["code_categories"].items():
        for code, cat in mapping.items():
            code_category[(Modality(m_text), code)] = cat
    return CodeVocabulary(code_index, category_index, code_category)


def _config_to_obj(cfg: ModelConfig) -> dict:
    return {
        "d": cfg.d, "heads": cfg.heads, "ff_width": cfg.ff_width,
        "enc_layers": cfg.enc_layers, "dec_layers": cfg.dec_layers,
        "lambda": cfg.code_loss_weight, "dropout": cfg.dropout,
        "use_category_concat": cfg.use_category_concat,
        "use_cost_loss": cfg.use_cost_loss, "cross_attend": cfg.cross_attend,
        "learned_date_cost": cfg.learned_date_cost,
        "scale_cost_targets": cfg.scale_cost_targets, "activation": cfg.activation,
    }


def _config_from_obj(obj: Mapping) -> ModelConfig:
    return ModelConfig(
        d=obj["d"], heads=obj["heads"], ff_width=obj["ff_width"],
        enc_layers=obj["enc_layers"], dec_layers=obj["dec_layers"],
        code_loss_weight=obj["lambda"], dropout=obj["dropout"],
        use_category_concat=obj["use_category_concat"],
        use_cost_loss=obj["use_cost_loss"], cross_attend=obj["cross_attend"],
        learned_date_cost=obj["learned_date_cost"],
        scale_cost_targets=obj["scale_cost_targets"], activation=obj["activation"],
    )


def save_checkpoint(state: ModelState, path) -> None:
    params = state.network.parameters()
    manifest = []
    offset = 0
    for p in params:
        nbytes = p.data.size * 8
        manifest.append({"name": p.name, "shape": list(p.data.shape), "offset": offset})
        offset += nbytes
    header = {
        "model_config": _config_to_obj(state.config),
        "vocab": _vocab_to_obj(state.vocab),
        "age_boundaries": list(state.grouper.boundaries),
        "binner": {"edges": state.binner.edges.tolist(),
                   "fitted_on": state.binner.fitted_on},
        "fingerprint": state.fingerprint,
        "metadata": state.metadata,
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for p in params:
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path, vocabulary: CodeVocabulary | None = None,
                    expected_config: ModelConfig | None = None) -> ModelState:
    """Rebuild a ModelState from a checkpoint file.

    Optionally verifies the vocabulary fingerprint against a supplied
    vocabulary and the stored config against an expected one; mismatches
    raise distinct errors.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise CheckpointTruncatedError("truncated checkpoint: missing preamble")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a TMAE checkpoint: bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + header_len:
        raise CheckpointTruncatedError("truncated checkpoint: incomplete header")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None

    config = _config_from_obj(header["model_config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointConfigError(
            f"checkpoint config {_config_to_obj(config)} does not match expected "
            f"{_config_to_obj(expected_config)}")
    vocab = _vocab_from_obj(header["vocab"])
    fingerprint = header["fingerprint"]
    if vocabulary is not None and vocabulary.fingerprint() != fingerprint:
        raise CheckpointFingerprintError(
            "checkpoint vocabulary fingerprint does not match the supplied vocabulary")
    grouper = AgeGrouper(tuple(header["age_boundaries"]))
    binner = CostBinner(np.array(header["binner"]["edges"]),
                        header["binner"]["fitted_on"])

    network = TmaeNetwork(config, vocab, grouper, seed=0)
    params = network.param_dict()
    manifest = header["manifest"]
    if sorted(params.keys()) != sorted(e["name"] for e in manifest):
        raise CheckpointError("checkpoint manifest does not match the model's parameters")
    payload = blob[16 + header_len:]
    for entry in manifest:
        p = params[entry["name"]]
        shape = tuple(entry["shape"])
        if p.data.shape != shape:
            raise CheckpointError(f"parameter {entry['name']} has shape {shape} in the "
                                  f"checkpoint but {p.data.shape} in the model")
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        end = entry["offset"] + nbytes
        if end > len(payload):
            raise CheckpointTruncatedError("truncated checkpoint: incomplete parameter "
                                           f"blob for {entry['name']}")
        p.data[...] = np.frombuffer(payload[entry["offset"]:end],
                                    dtype="<f8").reshape(shape)
    return ModelState(network, config, binner, vocab, grouper, fingerprint,
                      dict(header.get("metadata", {})))


def write_history_csv(history: Sequence[HistoryRow], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,l_loss,l_code,l_cost\n")
        for row in history:
            f.write(f"{row.step},{row.l_loss!r},{row.l_code!r},{row.l_cost!r}\n")
