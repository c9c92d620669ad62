"""Command-line pipelines: generate, train, embed, cluster, report,
gradcheck, benchmark.

Every command validates its inputs before writing anything, is
deterministic given its flags and seed, and exits with 0 on success, 1 on
a validation problem, and 2 on a runtime abort (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__
from .autodiff import grad_check
from .claims import (
    CategoryMap,
    ParseError,
    ValidationError,
    build_vocabulary,
    load_category_map,
    load_claims,
)
from .clustering import (
    ClusteringError,
    calinski_harabasz,
    cohort_report,
    davies_bouldin,
    elbow_select,
    kmeans,
    pca_baseline_embeddings,
    pca_fit_transform,
)
from .network import ModelConfig, TmaeNetwork, VARIANTS, batch_loss, prepare_patient
from .seeding import derive_rng
from .synth import (
    CohortSpec,
    LabeledDataset,
    generate_condition_benchmark,
    generate_cost_tier_benchmark,
    generate_custom_benchmark,
    load_truth_labels,
    save_dataset,
    spec_hash,
)
from .training import (
    CheckpointError,
    TrainConfig,
    TrainingAbort,
    embed_records,
    load_checkpoint,
    save_checkpoint,
    train_variant,
    write_history_csv,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class CliError(ValueError):
    """User-facing validation problem; maps to exit code 1."""


# ---------------------------------------------------------------------------
# flat config files: `section.key = value`, one per line, # comments


CONFIG_SCHEMA = {
    "model.d": int,
    "model.heads": int,
    "model.lambda": float,
    "model.ff_width": int,
    "model.dropout": float,
    "model.use_category_concat": bool,
    "model.use_cost_loss": bool,
    "model.cross_attend": bool,
    "model.learned_date_cost": bool,
    "model.scale_cost_targets": bool,
    "model.activation": str,
    "training.epochs": int,
    "training.batch_size": int,
    "training.lr": float,
    "training.seed": int,
    "training.shuffle": bool,
    "training.pretrain_embeddings": bool,
    "training.pretrain_epochs": int,
    "training.log_every": int,
    "training.max_steps": int,
    "training.optimizer": str,
    "training.holdout": float,
    "data.claims": str,
    "data.category_map": str,
    "evaluation.k_range": str,
    "evaluation.metrics": str,
}

REQUIRED_CONFIG_KEYS = (
    "model.d", "model.heads", "model.lambda",
    "training.epochs", "training.batch_size", "training.lr", "training.seed",
)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    values: dict

    def get(self, key, default=None):
        return self.values.get(key, default)

    def __contains__(self, key):
        return key in self.values


def load_run_config(path) -> RunConfig:
    """Parse and validate a flat key=value config file."""
    values: dict = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}: line {lineno}: expected `section.key = value`")
            key, _, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in CONFIG_SCHEMA:
                raise CliError(f"{path}: line {lineno}: unknown config key {key!r}")
            caster = CONFIG_SCHEMA[key]
            try:
                values[key] = _parse_bool(raw) if caster is bool else caster(raw)
            except ValueError:
                raise CliError(f"{path}: line {lineno}: bad value for {key}: {raw!r}")
    for key in REQUIRED_CONFIG_KEYS:
        if key not in values:
            raise CliError(f"{path}: missing config key {key!r}")
    return RunConfig(values)


def model_config_from(config: RunConfig) -> ModelConfig:
    try:
        return ModelConfig(
            d=config.get("model.d"),
            heads=config.get("model.heads"),
            ff_width=config.get("model.ff_width"),
            code_loss_weight=config.get("model.lambda"),
            dropout=config.get("model.dropout", 0.0),
            use_category_concat=config.get("model.use_category_concat", True),
            use_cost_loss=config.get("model.use_cost_loss", True),
            cross_attend=config.get("model.cross_attend", False),
            learned_date_cost=config.get("model.learned_date_cost", False),
            scale_cost_targets=config.get("model.scale_cost_targets", False),
            activation=config.get("model.activation", "gelu"),
        )
    except ValueError as e:
        raise CliError(f"invalid model config: {e}") from None


def train_config_from(config: RunConfig) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=config.get("training.epochs"),
            batch_size=config.get("training.batch_size"),
            learning_rate=config.get("training.lr"),
            seed=config.get("training.seed"),
            shuffle=config.get("training.shuffle", True),
            pretrain_embeddings=config.get("training.pretrain_embeddings", False),
            pretrain_epochs=config.get("training.pretrain_epochs", 3),
            log_every=config.get("training.log_every", 10),
            max_steps=config.get("training.max_steps"),
            optimizer=config.get("training.optimizer", "adam"),
            holdout=config.get("training.holdout", 0.0),
        )
    except ValueError as e:
        raise CliError(f"invalid training config: {e}") from None


# ---------------------------------------------------------------------------
# small file formats


def write_embeddings_csv(ids, matrix, path) -> None:
    d = matrix.shape[1]
    with open(path, "w", encoding="utf-8") as f:
        f.write("patient_id," + ",".join(f"c{i}" for i in range(d)) + "\n")
        for pid, row in zip(ids, matrix):
            f.write(pid + "," + ",".join(repr(float(x)) for x in row) + "\n")


def read_embeddings_csv(path):
    ids = []
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split(",")
        if not header or header[0] != "patient_id":
            raise CliError(f"{path}: expected an embeddings CSV with a patient_id column")
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            ids.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    if not rows:
        raise CliError(f"{path}: no embeddings found")
    return ids, np.asarray(rows)


def write_assignments_tsv(ids, assignments, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for pid, cluster in zip(ids, assignments):
            f.write(f"{pid}\t{int(cluster)}\n")


def read_assignments_tsv(path) -> dict:
    out: dict = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                pid, cluster = line.split("\t")
                out[pid] = int(cluster)
            except ValueError:
                raise CliError(f"{path}: line {lineno}: expected `patient_id<TAB>cluster`")
    return out


def _require_file(path, what: str) -> None:
    if not os.path.isfile(path):
        raise CliError(f"{what} not found: {path}")


def _load_dataset_inputs(data_path, category_map_path=None):
    _require_file(data_path, "claims file")
    if category_map_path is None:
        category_map_path = os.path.join(os.path.dirname(os.path.abspath(data_path)),
                                         "category_map.tsv")
    _require_file(category_map_path, "category map")
    records = load_claims(data_path)
    category_map = load_category_map(category_map_path)
    return records, category_map


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    out_dir = args.out
    if args.benchmark == "conditions":
        dataset = generate_condition_benchmark(args.n_per_cohort, args.seed)
        recipe = {"benchmark": "conditions", "seed": args.seed,
                  "n_per_cohort": args.n_per_cohort}
    elif args.benchmark == "cost-tiers":
        dataset = generate_cost_tier_benchmark(args.seed)
        recipe = {"benchmark": "cost-tiers", "seed": args.seed}
    else:
        if not args.spec:
            raise CliError("--benchmark custom requires --spec FILE")
        _require_file(args.spec, "spec file")
        with open(args.spec, "r", encoding="utf-8") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise CliError(f"{args.spec}: invalid JSON: {e}") from None
        try:
            cohorts = [(CohortSpec.from_obj(c), int(c["n"])) for c in raw["cohorts"]]
            from .claims import Modality

            category_map: CategoryMap = {
                (Modality(m), code): cat for m, code, cat in raw["category_map"]}
        except (KeyError, TypeError, ValueError) as e:
            raise CliError(f"{args.spec}: bad cohort spec: {e}") from None
        dataset = generate_custom_benchmark(cohorts, category_map, args.seed)
        recipe = {"benchmark": "custom", "seed": args.seed,
                  "cohorts": [c.to_obj() | {"n": n} for c, n in cohorts]}

    files = save_dataset(dataset, out_dir)
    manifest = {
        "benchmark": args.benchmark,
        "seed": args.seed,
        "patients": len(dataset.records),
        "spec_hash": spec_hash(recipe),
        "files": files,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"wrote {len(dataset.records)} patients to {out_dir} "
          f"(spec hash {manifest['spec_hash'][:12]})")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    records, category_map = _load_dataset_inputs(
        args.data, args.category_map or config.get("data.category_map"))
    model_cfg = model_config_from(config)
    train_cfg = train_config_from(config)
    state, history = train_variant(args.variant, records, category_map,
                                   model_cfg, train_cfg)
    save_checkpoint(state, args.out)
    history_path = args.history or args.out + ".history.csv"
    write_history_csv(history, history_path)
    final = history[-1]
    print(f"trained {args.variant} for {final.step} steps: "
          f"l_loss={final.l_loss:.6g} l_code={final.l_code:.6g} "
          f"l_cost={final.l_cost:.6g}")
    print(f"checkpoint: {args.out}\nhistory: {history_path}")
    return EXIT_OK


def cmd_embed(args) -> int:
    _require_file(args.ckpt, "checkpoint")
    records, category_map = _load_dataset_inputs(args.data, args.category_map)
    vocab = build_vocabulary(records, category_map)
    state = load_checkpoint(args.ckpt, vocabulary=vocab)
    ids, matrix = embed_records(records, state)
    write_embeddings_csv(ids, matrix, args.out)
    print(f"wrote {len(ids)} embeddings of width {matrix.shape[1]} to {args.out}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    ids, points = read_embeddings_csv(args.embeddings)
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.embeddings))
    os.makedirs(out_dir, exist_ok=True)

    if args.elbow:
        k_range = range(1, args.k_max + 1)
        chosen, curve = elbow_select(points, k_range, seed=args.seed)
        curve_path = os.path.join(out_dir, "wss_curve.csv")
        with open(curve_path, "w", encoding="utf-8") as f:
            f.write("k,wss\n")
            for k, wss in curve:
                f.write(f"{k},{wss!r}\n")
        print(f"elbow k = {chosen} (curve: {curve_path})")
        k = chosen
    elif args.k:
        k = args.k
    else:
        raise CliError("need either --k N or --elbow --k-max N")

    result = kmeans(points, k, seed=args.seed)
    assignments_path = os.path.join(out_dir, "assignments.tsv")
    write_assignments_tsv(ids, result.assignments, assignments_path)

    scores = []
    if k >= 2:
        ch = calinski_harabasz(points, result.assignments)
        db = davies_bouldin(points, result.assignments)
        scores = [("C-H", ch), ("D-B", db)]
        print(f"k={k}  C-H={ch:.4f}  D-B={db:.4f}")
    else:
        print(f"k={k} (indices need k >= 2)")

    plot = pca_fit_transform(points, min(2, points.shape[1]))
    plot_path = os.path.join(out_dir, "plot_data.csv")
    with open(plot_path, "w", encoding="utf-8") as f:
        f.write("patient_id,x,y,label\n")
        for pid, row, cluster in zip(ids, plot.projection, result.assignments):
            y = row[1] if row.shape[0] > 1 else 0.0
            f.write(f"{pid},{row[0]!r},{y!r},{int(cluster)}\n")
    print(f"assignments: {assignments_path}\nplot data: {plot_path}")

    if args.metrics_out and scores:
        with open(args.metrics_out, "w", encoding="utf-8") as f:
            f.write("metric,value\n")
            for name, value in scores:
                f.write(f"{name},{value!r}\n")
    return EXIT_OK


def cmd_report(args) -> int:
    records, _ = _load_dataset_inputs(args.data, args.category_map) \
        if args.category_map else (load_claims(args.data), None)
    _require_file(args.assignments, "assignments file")
    assignments = read_assignments_tsv(args.assignments)
    report = cohort_report(records, assignments)
    text = report.to_tsv()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .claims import Modality, clean_record
    from .embeddings import fit_cost_bins

    rng = derive_rng(args.seed, "gradcheck:data")
    diag_pool = [f"G{i}" for i in range(12)]
    proc_pool = [f"Q{i}" for i in range(8)]
    drug_pool = [f"H{i}" for i in range(6)]
    category_map = {}
    for i, code in enumerate(diag_pool):
        category_map[(Modality.DIAG, code)] = f"gc{i % 5}"
    for i, code in enumerate(proc_pool):
        category_map[(Modality.PROC, code)] = f"gc{i % 5}"
    for i, code in enumerate(drug_pool):
        category_map[(Modality.DRUG, code)] = f"gc{i % 5}"

    records = []
    for i in range(3):
        visits = []
        dates = np.sort(rng.integers(0, 366, size=int(rng.integers(2, 5))))
        for date in dates:
            claim_type = ["IP", "OP", "RX"][int(rng.integers(3))]
            visits.append({
                "date": int(date), "type": claim_type,
                "diag": list(rng.choice(diag_pool, size=int(rng.integers(1, 4)),
                                        replace=False)),
                "proc": list(rng.choice(proc_pool, size=int(rng.integers(0, 3)),
                                        replace=False)),
                "drug": [drug_pool[int(rng.integers(6))]],
                "cost": float(np.round(rng.uniform(1, 800), 2)),
            })
        records.append(clean_record({"patient_id": f"g{i}", "age": int(rng.integers(1, 17)),
                                     "gender": "F" if rng.random() < 0.5 else "M",
                                     "visits": visits}))

    vocab = build_vocabulary(records, category_map)
    binner = fit_cost_bins(np.linspace(0.0, 1000.0, 120))
    config = ModelConfig(d=args.d, heads=2, ff_width=2 * args.d)
    network = TmaeNetwork(config, vocab, seed=args.seed)
    jitter = derive_rng(args.seed, "gradcheck:jitter")
    for p in network.parameters():
        p.data += jitter.uniform(-1e-3, 1e-3, size=p.data.shape)
    preps = [prepare_patient(r, vocab, binner) for r in records]

    def forward():
        loss, _, _ = batch_loss(network, preps, binner)
        return loss

    err = grad_check(forward, network.parameters(), eps=1e-5)
    passed = err < 1e-4
    print(f"max relative gradient error: {err:.3e} "
          f"({'PASS' if passed else 'FAIL'} at 1e-4)")
    return EXIT_OK if passed else EXIT_VALIDATION


def _benchmark_embeddings(dataset: LabeledDataset, variant: str, d: int, steps: int,
                          lr: float, seed: int):
    model_cfg = ModelConfig(d=d, heads=4)
    train_cfg = TrainConfig(epochs=10_000, batch_size=32, learning_rate=lr,
                            seed=seed, max_steps=steps, log_every=0)
    state, _ = train_variant(variant, list(dataset.records),
                             dataset.category_map, model_cfg, train_cfg)
    return embed_records(dataset.records, state)


def cmd_benchmark(args) -> int:
    tasks = []
    print(f"generating benchmarks (seed {args.seed})")
    conditions = generate_condition_benchmark(args.n_per_cohort, args.seed)
    tiers = generate_cost_tier_benchmark(args.seed)
    tasks.append(("task1-conditions", conditions, 4))
    tasks.append(("task2-cost-tiers", tiers, 3))

    rows = []
    for task_name, dataset, k in tasks:
        vocab = build_vocabulary(list(dataset.records), dataset.category_map)
        _, pca_points = pca_baseline_embeddings(list(dataset.records), vocab,
                                                out_dim=args.d)
        result = kmeans(pca_points, k, seed=args.seed)
        rows.append((task_name, "PCA",
                     calinski_harabasz(pca_points, result.assignments),
                     davies_bouldin(pca_points, result.assignments)))
        print(f"{task_name}: PCA done")
        for variant in ("p-tmae", "c-tmae", "tmae"):
            _, points = _benchmark_embeddings(dataset, variant, args.d, args.steps,
                                              args.lr, args.seed)
            result = kmeans(points, k, seed=args.seed)
            rows.append((task_name, variant.upper(),
                         calinski_harabasz(points, result.assignments),
                         davies_bouldin(points, result.assignments)))
            print(f"{task_name}: {variant} done")

    header = f"{'task':<20} {'model':<8} {'C-H':>10} {'D-B':>8}"
    lines = [header, "-" * len(header)]
    for task_name, model, ch, db in rows:
        lines.append(f"{task_name:<20} {model:<8} {ch:>10.2f} {db:>8.2f}")
    table = "\n".join(lines)
    print(table)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "benchmark.tsv"), "w", encoding="utf-8") as f:
            f.write("task\tmodel\tch\tdb\n")
            for task_name, model, ch, db in rows:
                f.write(f"{task_name}\t{model}\t{ch!r}\t{db!r}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); keep 2 for runtime aborts
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tmae",
                     description="Patient representation learning on claims data")
    parser.add_argument("--version", action="version", version=f"tmae {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic labeled dataset")
    p.add_argument("--benchmark", choices=("conditions", "cost-tiers", "custom"),
                   required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-per-cohort", type=int, default=300)
    p.add_argument("--spec", help="cohort spec JSON (custom benchmark only)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model variant on a claims file")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--variant", choices=VARIANTS, default="tmae")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--category-map", help="defaults to category_map.tsv next to --data")
    p.add_argument("--history", help="loss history CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="extract patient embeddings")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="embeddings CSV path")
    p.add_argument("--category-map")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("cluster", help="k-means over an embeddings CSV")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--elbow", action="store_true")
    p.add_argument("--k-max", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir")
    p.add_argument("--metrics-out")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("report", help="per-cluster cohort statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--assignments", required=True)
    p.add_argument("--out")
    p.add_argument("--category-map")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("benchmark", help="full pipeline comparison table")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--n-per-cohort", type=int, default=300)
    p.add_argument("--out", help="directory for benchmark.tsv")
    p.set_defaults(func=cmd_benchmark)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValidationError, ParseError, ClusteringError, CheckpointError,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingAbort as e:
        print(f"runtime abort: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
