"""Clustering evaluation: k-means, elbow/WSS, cluster-quality indices,
the PCA baseline, and per-cluster cohort reports.

k-means uses k-means++ seeding with restarts and picks the lowest-WSS run;
empty clusters are repaired by reseeding at the point farthest from its
assigned centroid, which never increases the objective. Everything is
deterministic given the seed.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .claims import CodeVocabulary, Modality, PatientRecord
from .seeding import derive_rng


class ClusteringError(ValueError):
    pass


@dataclass
class ClusteringResult:
    assignments: np.ndarray  # [n] cluster index per point
    centroids: np.ndarray  # [k x d]
    wss: float
    iterations: int
    wss_history: tuple[float, ...] = ()  # per-iteration WSS of the winning run


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (x - c)^2 expanded; clamp tiny negatives from cancellation
    d2 = (np.sum(points ** 2, axis=1)[:, None]
          + np.sum(centroids ** 2, axis=1)[None, :]
          - 2.0 * points @ centroids.T)
    return np.maximum(d2, 0.0)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = points[idx]
        closest = np.minimum(closest, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int):
    n, _ = points.shape
    k = centroids.shape[0]
    assignments = np.full(n, -1, dtype=np.intp)
    history: list[float] = []
    prev_wss = np.inf
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        d2 = _squared_distances(points, centroids)
        new_assignments = np.argmin(d2, axis=1)
        # repair empty clusters at the farthest point from its own centroid
        while True:
            sizes = np.bincount(new_assignments, minlength=k)
            empty = np.flatnonzero(sizes == 0)
            if empty.size == 0:
                break
            own = d2[np.arange(n), new_assignments]
            farthest = int(np.argmax(own))
            centroids[empty[0]] = points[farthest]
            d2 = _squared_distances(points, centroids)
            new_assignments = np.argmin(d2, axis=1)
        for j in range(k):
            centroids[j] = points[new_assignments == j].mean(axis=0)
        wss = float(np.sum((points - centroids[new_assignments]) ** 2))
        assert wss <= prev_wss, f"WSS increased: {prev_wss} -> {wss}"
        history.append(wss)
        converged = np.array_equal(new_assignments, assignments)
        assignments = new_assignments
        prev_wss = wss
        if converged:
            break
    return assignments, centroids, prev_wss, iterations, tuple(history)


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 300,
           n_init: int = 10) -> ClusteringResult:
    """Best-of-``n_init`` Lloyd's algorithm with k-means++ seeding.

    Deterministic given the seed; restarts are ranked by WSS with ties
    broken toward the earlier restart.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = points.shape[0]
    if k < 1:
        raise ClusteringError(f"k must be >= 1, got {k}")
    if k > n:
        raise ClusteringError(f"k={k} exceeds the number of points n={n}")
    best: ClusteringResult | None = None
    for restart in range(n_init):
        rng = derive_rng(seed, f"kmeans:{restart}")
        init = _kmeanspp_init(points, k, rng)
        assignments, centroids, wss, iterations, history = _lloyd(
            points, init.copy(), max_iter)
        if best is None or wss < best.wss:
            best = ClusteringResult(assignments, centroids, wss, iterations, history)
    return best


def select_elbow_from_curve(ks: Sequence[int], wss: Sequence[float]) -> int:
    """The k whose WSS second difference is largest (ties go to smaller k)."""
    if len(ks) < 3:
        raise ClusteringError("elbow selection needs at least 3 k values")
    best_k = None
    best_gain = -np.inf
    for i in range(1, len(ks) - 1):
        gain = (wss[i - 1] - wss[i]) - (wss[i] - wss[i + 1])
        if gain > best_gain:
            best_gain = gain
            best_k = ks[i]
    return int(best_k)


def elbow_select(points: np.ndarray, k_range: Sequence[int] | None = None,
                 seed: int = 0, n_init: int = 10):
    """WSS curve over ``k_range`` plus the elbow choice.

    Returns ``(chosen_k, curve)`` where curve is a list of (k, wss) pairs.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = points.shape[0]
    if k_range is None:
        k_range = range(1, min(10, n) + 1)
    ks = sorted(set(int(k) for k in k_range))
    if not ks or ks[0] < 1 or ks[-1] > n:
        raise ClusteringError(f"k_range must lie within [1, {n}], got {ks}")
    if len(ks) < 3:
        raise ClusteringError("elbow selection needs at least 3 candidate k values")
    curve = [(k, kmeans(points, k, seed, n_init=n_init).wss) for k in ks]
    chosen = select_elbow_from_curve([k for k, _ in curve], [w for _, w in curve])
    return chosen, curve


# ---------------------------------------------------------------------------
# cluster quality indices


def _split_by_label(points: np.ndarray, labels: np.ndarray):
    classes = np.unique(labels)
    return [(c, points[labels == c]) for c in classes]


def calinski_harabasz(points: np.ndarray, labels) -> float:
    """Between/within dispersion ratio scaled by degrees of freedom
    (higher is better)."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    n = points.shape[0]
    groups = _split_by_label(points, labels)
    k = len(groups)
    if k < 2:
        raise ClusteringError(f"need at least 2 clusters, got {k}")
    if k >= n:
        raise ClusteringError(f"need more points than clusters, got n={n}, k={k}")
    overall = points.mean(axis=0)
    between = 0.0
    within = 0.0
    for _, members in groups:
        centroid = members.mean(axis=0)
        between += members.shape[0] * float(np.sum((centroid - overall) ** 2))
        within += float(np.sum((members - centroid) ** 2))
    if within == 0.0:
        raise ClusteringError("zero within-cluster dispersion")
    return (between / (k - 1)) / (within / (n - k))


def davies_bouldin(points: np.ndarray, labels) -> float:
    """Mean worst-case scatter-to-separation ratio (lower is better, min 0)."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    groups = _split_by_label(points, labels)
    k = len(groups)
    if k < 2:
        raise ClusteringError(f"need at least 2 clusters, got {k}")
    centroids = np.stack([members.mean(axis=0) for _, members in groups])
    scatters = np.array([
        float(np.mean(np.linalg.norm(members - centroids[i], axis=1)))
        for i, (_, members) in enumerate(groups)
    ])
    total = 0.0
    for i in range(k):
        worst = 0.0
        for j in range(k):
            if i == j:
                continue
            separation = float(np.linalg.norm(centroids[i] - centroids[j]))
            numerator = scatters[i] + scatters[j]
            if separation == 0.0:
                if numerator == 0.0:
                    continue  # coincident centroids with no scatter contribute 0
                raise ClusteringError("coincident centroids with nonzero scatter")
            worst = max(worst, numerator / separation)
        total += worst
    return total / k


def cluster_purity(assignments, truth) -> float:
    """Fraction of points whose cluster's majority truth label matches theirs."""
    assignments = np.asarray(assignments)
    truth = np.asarray(truth)
    if assignments.shape != truth.shape:
        raise ClusteringError("assignments and truth labels differ in length")
    correct = 0
    for c in np.unique(assignments):
        _, counts = np.unique(truth[assignments == c], return_counts=True)
        correct += int(counts.max())
    return correct / assignments.size


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaResult:
    projection: np.ndarray  # [n x out_dim]
    components: np.ndarray  # [out_dim x d], rows orthonormal
    mean: np.ndarray  # [d]
    explained_variance_ratio: np.ndarray  # [out_dim]


def pca_fit_transform(points: np.ndarray, out_dim: int) -> PcaResult:
    """Mean-center, factor, and project onto the top components.

    Components are ordered by explained variance; each is sign-fixed so its
    largest-magnitude loading is positive.
    """
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    if not 1 <= out_dim <= min(n, d):
        raise ClusteringError(f"out_dim must be in [1, {min(n, d)}], got {out_dim}")
    mean = points.mean(axis=0)
    centered = points - mean
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    variances = singular ** 2 / max(n - 1, 1)
    total = float(variances.sum())
    components = vt[:out_dim].copy()
    for row in components:
        pivot = int(np.argmax(np.abs(row)))
        if row[pivot] < 0:
            row *= -1.0
    projection = centered @ components.T
    ratio = (variances[:out_dim] / total) if total > 0 else np.zeros(out_dim)
    return PcaResult(projection, components, mean, ratio)


def aggregate_code_counts(records: Sequence[PatientRecord], vocab: CodeVocabulary,
                          binary: bool = False):
    """Per-patient yearly code counts over the concatenated vocabularies.

    ``binary=True`` collapses counts to presence flags. This is the feature
    matrix for the PCA baseline.
    """
    ids = []
    rows = np.zeros((len(records), vocab.total_codes))
    offsets = {Modality.DIAG: 0, Modality.PROC: vocab.n_diag,
               Modality.DRUG: vocab.n_diag + vocab.n_proc}
    for i, record in enumerate(records):
        ids.append(record.patient_id)
        for visit in record.visits:
            for modality in Modality:
                for code in visit.codes(modality):
                    rows[i, offsets[modality] + vocab.index_of(modality, code)] += 1.0
    if binary:
        rows = (rows > 0).astype(np.float64)
    return ids, rows


def pca_baseline_embeddings(records: Sequence[PatientRecord], vocab: CodeVocabulary,
                            out_dim: int, binary: bool = False):
    """The baseline representation: aggregated code counts through PCA."""
    ids, features = aggregate_code_counts(records, vocab, binary=binary)
    return ids, pca_fit_transform(features, out_dim).projection


# ---------------------------------------------------------------------------
# cohort reports


@dataclass(frozen=True)
class ClusterReportRow:
    cluster: int
    size: int
    average_age: float
    female_pct: float
    avg_op_visits: float
    avg_ip_visits: float
    median_rx_cost: float
    median_total_cost: float


@dataclass(frozen=True)
class ClusterReport:
    rows: tuple[ClusterReportRow, ...]

    COLUMNS = ("cluster", "size", "average_age", "female_pct", "avg_op_visits",
               "avg_ip_visits", "median_rx_cost", "median_total_cost")

    def to_tsv(self) -> str:
        lines = ["\t".join(self.COLUMNS)]
        for r in self.rows:
            lines.append("\t".join([
                str(r.cluster), str(r.size), f"{r.average_age:.4g}",
                f"{r.female_pct:.4g}", f"{r.avg_op_visits:.4g}",
                f"{r.avg_ip_visits:.4g}", f"{r.median_rx_cost:.2f}",
                f"{r.median_total_cost:.2f}",
            ]))
        return "\n".join(lines) + "\n"


def cohort_report(records: Sequence[PatientRecord],
                  assignments: Mapping[str, int]) -> ClusterReport:
    """Per-cluster demographics and resource burden.

    RX cost sums costs on pharmacy-type visits; medians use the lower-median
    convention for even counts.
    """
    by_id = {r.patient_id: r for r in records}
    missing = [pid for pid in assignments if pid not in by_id]
    if missing:
        raise ClusteringError(f"assigned ids missing from records: {missing[:5]}")
    clusters: dict[int, list[PatientRecord]] = {}
    for pid, cluster in assignments.items():
        clusters.setdefault(int(cluster), []).append(by_id[pid])
    rows = []
    for cluster in sorted(clusters):
        members = clusters[cluster]
        ages = [r.demographics.age_years for r in members]
        female = sum(1 for r in members if r.demographics.gender == "F")
        op_counts = [sum(1 for v in r.visits if v.claim_type == "OP") for r in members]
        ip_counts = [sum(1 for v in r.visits if v.claim_type == "IP") for r in members]
        rx_costs = [sum(v.cost for v in r.visits if v.claim_type == "RX")
                    for r in members]
        total_costs = [sum(v.cost for v in r.visits) for r in members]
        rows.append(ClusterReportRow(
            cluster=cluster,
            size=len(members),
            average_age=float(np.mean(ages)),
            female_pct=100.0 * female / len(members),
            avg_op_visits=float(np.mean(op_counts)),
            avg_ip_visits=float(np.mean(ip_counts)),
            median_rx_cost=float(statistics.median_low(rx_costs)),
            median_total_cost=float(statistics.median_low(total_costs)),
        ))
    return ClusterReport(tuple(rows))
