"""The autoencoder network: one-layer transformer encoder over
[demographics token; visit vectors], a bottleneck patient embedding, and a
query-driven non-autoregressive transformer decoder with dual heads.

The decoder's queries carry only dates, claim types, and the patient
embedding; codes and costs never enter it, so everything the reconstruction
heads recover must flow through the bottleneck. Two ablations are wired in:
dropping the category half of code embeddings, and dropping the cost term
from the joint loss.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .claims import (
    CodeVocabulary,
    EncodedVisit,
    Modality,
    PatientRecord,
    encode_visit,
    multi_hot,
)
from .embeddings import (
    AgeGrouper,
    CostBinner,
    DEFAULT_AGE_GROUPER,
    EmbeddingTables,
    build_visit_matrix,
    pool_visit,
    sinusoid_embed,
)
from .seeding import derive_rng

VARIANTS = ("tmae", "p-tmae", "c-tmae")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and objective settings.

    ``use_category_concat=False`` is the P-TMAE ablation (full-width code
    vectors, no category half); ``use_cost_loss=False`` is the C-TMAE
    ablation (cost term removed from the objective).
    """

    d: int = 64
    heads: int = 4
    ff_width: int | None = None  # defaults to 4*d
    enc_layers: int = 1
    dec_layers: int = 1
    code_loss_weight: float = 2e-6  # the config-file key is model.lambda
    dropout: float = 0.0
    use_category_concat: bool = True
    use_cost_loss: bool = True
    cross_attend: bool = False
    learned_date_cost: bool = False
    scale_cost_targets: bool = False
    activation: str = "gelu"

    def __post_init__(self) -> None:
        if self.d <= 0 or self.d % 2 != 0:
            raise ValueError(f"d must be a positive even number, got {self.d}")
        if self.heads < 1 or self.d % self.heads != 0:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.ff_width is None:
            object.__setattr__(self, "ff_width", 4 * self.d)
        if self.ff_width < 1:
            raise ValueError("ff_width must be positive")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("encoder and decoder need at least one layer")
        if self.code_loss_weight < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"activation must be gelu or relu, got {self.activation!r}")


def apply_variant(config: ModelConfig, variant: str) -> ModelConfig:
    """Return the config with the named ablation applied."""
    variant = variant.lower()
    if variant == "tmae":
        return replace(config, use_category_concat=True, use_cost_loss=True)
    if variant == "p-tmae":
        return replace(config, use_category_concat=False, use_cost_loss=True)
    if variant == "c-tmae":
        return replace(config, use_category_concat=True, use_cost_loss=False)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class EncoderOutput:
    """Row-0 bottleneck vector plus the contextualized visit vectors."""

    pe: Tensor  # [d]
    contextual: Tensor  # [T x d]


@dataclass
class DecoderOutput:
    code_logits: Tensor  # [T x total_codes]
    cost_pred: Tensor  # [T], dollars


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class AttentionParams:
    def __init__(self, prefix: str, d: int, rng: np.random.Generator) -> None:
        self.wq = Parameter(f"{prefix}.wq", _glorot(rng, d, d))
        self.bq = Parameter(f"{prefix}.bq", np.zeros(d))
        self.wk = Parameter(f"{prefix}.wk", _glorot(rng, d, d))
        self.bk = Parameter(f"{prefix}.bk", np.zeros(d))
        self.wv = Parameter(f"{prefix}.wv", _glorot(rng, d, d))
        self.bv = Parameter(f"{prefix}.bv", np.zeros(d))
        self.wo = Parameter(f"{prefix}.wo", _glorot(rng, d, d))
        self.bo = Parameter(f"{prefix}.bo", np.zeros(d))

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]


class BlockParams:
    """Parameters of one transformer block (optionally with cross-attention)."""

    def __init__(self, prefix: str, d: int, ff_width: int,
                 rng: np.random.Generator, cross: bool = False) -> None:
        self.self_attn = AttentionParams(f"{prefix}.attn", d, rng)
        self.ln1_g = Parameter(f"{prefix}.ln1.gain", np.ones(d))
        self.ln1_b = Parameter(f"{prefix}.ln1.bias", np.zeros(d))
        self.cross_attn = AttentionParams(f"{prefix}.cross", d, rng) if cross else None
        self.ln_cross_g = Parameter(f"{prefix}.lnx.gain", np.ones(d)) if cross else None
        self.ln_cross_b = Parameter(f"{prefix}.lnx.bias", np.zeros(d)) if cross else None
        self.w1 = Parameter(f"{prefix}.ffn.w1", _glorot(rng, d, ff_width))
        self.b1 = Parameter(f"{prefix}.ffn.b1", np.zeros(ff_width))
        self.w2 = Parameter(f"{prefix}.ffn.w2", _glorot(rng, ff_width, d))
        self.b2 = Parameter(f"{prefix}.ffn.b2", np.zeros(d))
        self.ln2_g = Parameter(f"{prefix}.ln2.gain", np.ones(d))
        self.ln2_b = Parameter(f"{prefix}.ln2.bias", np.zeros(d))

    def parameters(self) -> list[Parameter]:
        params = self.self_attn.parameters()
        params += [self.ln1_g, self.ln1_b]
        if self.cross_attn is not None:
            params += self.cross_attn.parameters()
            params += [self.ln_cross_g, self.ln_cross_b]
        params += [self.w1, self.b1, self.w2, self.b2, self.ln2_g, self.ln2_b]
        return params


def multi_head_attention(queries: Tensor, keys_values: Tensor,
                         params: AttentionParams, heads: int) -> Tensor:
    """Scaled dot-product attention, unmasked, one column slice per head."""
    d = queries.shape[1]
    dh = d // heads
    q = ad.add(ad.matmul(queries, params.wq), params.bq)
    k = ad.add(ad.matmul(keys_values, params.wk), params.bk)
    v = ad.add(ad.matmul(keys_values, params.wv), params.bv)
    inv_scale = 1.0 / np.sqrt(dh)
    head_outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.slice_cols(q, lo, hi)
        kh = ad.slice_cols(k, lo, hi)
        vh = ad.slice_cols(v, lo, hi)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_scale)
        head_outs.append(ad.matmul(ad.softmax_rows(scores), vh))
    merged = head_outs[0] if heads == 1 else ad.concat_cols(head_outs)
    return ad.add(ad.matmul(merged, params.wo), params.bo)


def transformer_block(x: Tensor, block: BlockParams, heads: int,
                      activation: str = "gelu", enc_out: Tensor | None = None,
                      dropout_rate: float = 0.0,
                      rng: np.random.Generator | None = None) -> Tensor:
    """Self-attention, residual + layer norm, feed-forward, residual + norm."""
    attn = multi_head_attention(x, x, block.self_attn, heads)
    if dropout_rate > 0.0 and rng is not None:
        attn = ad.dropout(attn, dropout_rate, rng)
    y = ad.layer_norm(ad.add(x, attn), block.ln1_g, block.ln1_b)
    if block.cross_attn is not None and enc_out is not None:
        cross = multi_head_attention(y, enc_out, block.cross_attn, heads)
        y = ad.layer_norm(ad.add(y, cross), block.ln_cross_g, block.ln_cross_b)
    act = ad.gelu if activation == "gelu" else ad.relu
    hidden = act(ad.add(ad.matmul(y, block.w1), block.b1))
    ffn = ad.add(ad.matmul(hidden, block.w2), block.b2)
    if dropout_rate > 0.0 and rng is not None:
        ffn = ad.dropout(ffn, dropout_rate, rng)
    return ad.layer_norm(ad.add(y, ffn), block.ln2_g, block.ln2_b)


class TmaeNetwork:
    """All parameters plus the forward passes, bound to one vocabulary."""

    def __init__(self, config: ModelConfig, vocab: CodeVocabulary,
                 grouper: AgeGrouper = DEFAULT_AGE_GROUPER, seed: int = 0) -> None:
        self.config = config
        self.grouper = grouper
        self.vocab_sizes = (vocab.n_diag, vocab.n_proc, vocab.n_drug, vocab.n_categories)
        self.total_codes = vocab.total_codes
        d = config.d
        rng = derive_rng(seed, "init:tables")
        self.tables = EmbeddingTables(
            d, vocab.n_diag, vocab.n_proc, vocab.n_drug, vocab.n_categories,
            grouper.n_groups, use_category_concat=config.use_category_concat,
            learned_date_cost=config.learned_date_cost, rng=rng)
        rng = derive_rng(seed, "init:encoder")
        self.enc_blocks = [BlockParams(f"enc{i}", d, config.ff_width, rng)
                           for i in range(config.enc_layers)]
        rng = derive_rng(seed, "init:decoder")
        self.dec_blocks = [BlockParams(f"dec{i}", d, config.ff_width, rng,
                                       cross=config.cross_attend)
                           for i in range(config.dec_layers)]
        rng = derive_rng(seed, "init:heads")
        self.w_code = Parameter("head.code.w", _glorot(rng, d, max(self.total_codes, 1)))
        self.b_code = Parameter("head.code.b", np.zeros(max(self.total_codes, 1)))
        self.w_cost = Parameter("head.cost.w", _glorot(rng, d, 1))
        self.b_cost = Parameter("head.cost.b", np.zeros(1))
        self._dropout_rng: np.random.Generator | None = None
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names")

    def parameters(self) -> list[Parameter]:
        params = self.tables.parameters()
        for block in self.enc_blocks + self.dec_blocks:
            params += block.parameters()
        params += [self.w_code, self.b_code, self.w_cost, self.b_cost]
        return params

    def param_dict(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def set_training_rng(self, rng: np.random.Generator | None) -> None:
        """Enable dropout during training steps (inference leaves it None)."""
        self._dropout_rng = rng

    # ---- forward pieces -------------------------------------------------

    def encode(self, demo_token: Tensor, visit_vectors: Sequence[Tensor]) -> EncoderOutput:
        """Stack the demographics token ahead of the visit vectors and run
        the encoder; row 0 of the output is the patient embedding."""
        if len(visit_vectors) == 0:
            raise ValueError("patient has no visits")
        x = ad.concat_rows([demo_token, *visit_vectors])
        for block in self.enc_blocks:
            x = transformer_block(x, block, self.config.heads, self.config.activation,
                                  dropout_rate=self.config.dropout,
                                  rng=self._dropout_rng)
        pe = ad.take_row(x, 0)
        contextual = ad.slice_rows(x, 1, x.shape[0])
        return EncoderOutput(pe=pe, contextual=contextual)

    def build_decoder_queries(self, dates: Sequence[int], claim_types: Sequence[int],
                              pe: Tensor) -> Tensor:
        """Row 0 is the patient embedding; row t is date sinusoid plus
        utilization row. No code or cost information enters here."""
        if len(dates) != len(claim_types):
            raise ValueError(f"got {len(dates)} dates but {len(claim_types)} claim types")
        rows = [pe]
        for date, util_idx in zip(dates, claim_types):
            if self.tables.date_table is not None:
                date_part = ad.take_row(self.tables.date_table, date)
            else:
                date_part = Tensor(sinusoid_embed(date, self.config.d))
            rows.append(ad.add(date_part, ad.take_row(self.tables.util, util_idx)))
        return ad.concat_rows(rows)

    def decode(self, queries: Tensor, enc_out: Tensor | None = None) -> DecoderOutput:
        """Unmasked decoding over [pe; query rows]; rows 1..T feed the heads."""
        x = queries
        for block in self.dec_blocks:
            x = transformer_block(x, block, self.config.heads, self.config.activation,
                                  enc_out=enc_out, dropout_rate=self.config.dropout,
                                  rng=self._dropout_rng)
        body = ad.slice_rows(x, 1, x.shape[0])
        code_logits = ad.add(ad.matmul(body, self.w_code), self.b_code)
        cost_pred = ad.flatten(ad.add(ad.matmul(body, self.w_cost), self.b_cost))
        return DecoderOutput(code_logits=code_logits, cost_pred=cost_pred)


def clone_network(network: TmaeNetwork, vocab: CodeVocabulary) -> TmaeNetwork:
    """Fresh network with identical configuration and copied parameter data."""
    other = TmaeNetwork(network.config, vocab, network.grouper, seed=0)
    source = network.param_dict()
    for p in other.parameters():
        p.data[...] = source[p.name].data
    return other


def joint_loss(out: DecoderOutput, targets: np.ndarray, costs: np.ndarray,
               code_loss_weight: float, use_cost_loss: bool = True,
               cost_scale: float = 1.0):
    """Joint objective: mean absolute dollar error plus weighted sigmoid
    cross-entropy over the multi-hot code targets.

    Returns (total, code term, cost term) as tensors. With the cost loss
    disabled the cost term is still computed for reporting but off the tape,
    so nothing upstream of the cost head receives gradient from it.
    """
    targets = np.asarray(targets, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    if targets.shape != out.code_logits.shape:
        raise ValueError(f"target shape {targets.shape} does not match logits "
                         f"{out.code_logits.shape}")
    if costs.shape != out.cost_pred.shape:
        raise ValueError(f"cost shape {costs.shape} does not match predictions "
                         f"{out.cost_pred.shape}")
    if not np.all((targets == 0.0) | (targets == 1.0)):
        raise ValueError("code targets must be 0 or 1")
    if np.any(costs < 0):
        raise ValueError("costs must be non-negative")

    z = out.code_logits
    # stable elementwise -[y log s(z) + (1-y) log(1-s(z))] == softplus(z) - z*y
    l_code = ad.mean_all(ad.sub(ad.softplus(z), ad.mul(z, Tensor(targets))))
    if use_cost_loss:
        diff = ad.sub(out.cost_pred, Tensor(costs))
        l_cost = ad.mean_all(ad.absolute(diff))
        if cost_scale != 1.0:
            scaled = ad.scale(l_cost, 1.0 / cost_scale)
            l_loss = ad.add(scaled, ad.scale(l_code, code_loss_weight))
        else:
            l_loss = ad.add(l_cost, ad.scale(l_code, code_loss_weight))
    else:
        l_cost = Tensor(np.mean(np.abs(out.cost_pred.data - costs)))
        l_loss = ad.scale(l_code, code_loss_weight)
    return l_loss, l_code, l_cost


# ---------------------------------------------------------------------------
# record preparation and full passes


@dataclass
class PreparedPatient:
    """Everything static about one record: encodings, targets, query inputs."""

    patient_id: str
    encoded_visits: tuple[EncodedVisit, ...]
    category_indices: tuple[dict, ...]  # per visit: modality -> tuple of cat indices
    cost_bins: tuple[int, ...]
    age_group: int
    gender_index: int
    dates: tuple[int, ...]
    util_indices: tuple[int, ...]
    targets: np.ndarray  # [T x total_codes]
    costs: np.ndarray  # [T]


def category_lookup(vocab: CodeVocabulary) -> dict:
    """Per modality: code index -> category index, as one list each."""
    return {m: [vocab.category_index_of(m, c) for c in vocab.codes_in_order(m)]
            for m in Modality}


def prepare_patient(record: PatientRecord, vocab: CodeVocabulary,
                    binner: CostBinner,
                    grouper: AgeGrouper = DEFAULT_AGE_GROUPER,
                    cat_lookup: dict | None = None) -> PreparedPatient:
    if cat_lookup is None:
        cat_lookup = category_lookup(vocab)
    encoded = []
    cat_indices = []
    for visit in record.visits:
        ev = encode_visit(visit, vocab)
        encoded.append(ev)
        per_visit = {}
        for modality, idx in ((Modality.DIAG, ev.diag_idx),
                              (Modality.PROC, ev.proc_idx),
                              (Modality.DRUG, ev.drug_idx)):
            lookup = cat_lookup[modality]
            per_visit[modality] = tuple(lookup[i] for i in idx)
        cat_indices.append(per_visit)
    targets = np.stack([multi_hot(ev, vocab) for ev in encoded])
    costs = np.array([ev.cost for ev in encoded])
    return PreparedPatient(
        patient_id=record.patient_id,
        encoded_visits=tuple(encoded),
        category_indices=tuple(cat_indices),
        cost_bins=tuple(binner.bin_of(ev.cost) for ev in encoded),
        age_group=grouper.group_of(record.demographics.age_years),
        gender_index=0 if record.demographics.gender == "F" else 1,
        dates=tuple(ev.date for ev in encoded),
        util_indices=tuple(ev.util_index for ev in encoded),
        targets=targets,
        costs=costs,
    )


def encode_prepared(network: TmaeNetwork, prep: PreparedPatient,
                    binner: CostBinner) -> EncoderOutput:
    tables = network.tables
    visit_vectors = []
    for ev, cats, cost_bin in zip(prep.encoded_visits, prep.category_indices,
                                  prep.cost_bins):
        matrix = build_visit_matrix(ev, tables, binner, category_indices=cats,
                                    cost_bin=cost_bin)
        visit_vectors.append(pool_visit(matrix))
    demo = ad.concat_vecs([ad.take_row(tables.age, prep.age_group),
                           ad.take_row(tables.gender, prep.gender_index)])
    return network.encode(demo, visit_vectors)


def forward_patient(network: TmaeNetwork, prep: PreparedPatient,
                    binner: CostBinner) -> tuple[EncoderOutput, DecoderOutput]:
    enc = encode_prepared(network, prep, binner)
    queries = network.build_decoder_queries(prep.dates, prep.util_indices, enc.pe)
    dec = network.decode(queries, enc_out=enc.contextual
                         if network.config.cross_attend else None)
    return enc, dec


def batch_loss(network: TmaeNetwork, preps: Sequence[PreparedPatient],
               binner: CostBinner, cost_scale: float = 1.0):
    """Mean per-patient joint loss over a batch.

    Returns (loss tensor, mean code value, mean cost value) where the last
    two are plain floats for logging.
    """
    cfg = network.config
    per_patient = []
    code_vals = []
    cost_vals = []
    for prep in preps:
        _, dec = forward_patient(network, prep, binner)
        l_loss, l_code, l_cost = joint_loss(
            dec, prep.targets, prep.costs, cfg.code_loss_weight,
            use_cost_loss=cfg.use_cost_loss, cost_scale=cost_scale)
        per_patient.append(l_loss)
        code_vals.append(float(l_code.data))
        cost_vals.append(float(l_cost.data))
    total = per_patient[0]
    for piece in per_patient[1:]:
        total = ad.add(total, piece)
    total = ad.scale(total, 1.0 / len(per_patient))
    return total, float(np.mean(code_vals)), float(np.mean(cost_vals))
