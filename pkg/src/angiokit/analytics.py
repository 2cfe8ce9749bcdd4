"""Study-embedding analytics: embedding distance, longitudinal progression
classification, seeded k-means with silhouette, PCA via power iteration with
deflation, and cluster purity.

Embedding distance is 1 - cosine similarity; its full mathematical range is
[0, 2] (it collapses to [0, 1] only when embeddings are constrained
non-negative, which we do not assume).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ValidationError
from .evalstats import BootstrapResult, ScoredSamples, WelchResult, bootstrap_ci, welch_t_test
from .numerics import Rng, cosine_similarity, require_finite
from .types import SEGMENTS, SegmentLabelSet

PROGRESSION_STATUSES = ("stable", "improved", "progressed")
PROGRESSION_DELTA = 20.0  # absolute stenosis-percent change
NEW_STENOSIS_CUT = 50.0


def embedding_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cosine similarity; 0 means identical directions, 2 opposite."""
    return 1.0 - cosine_similarity(a, b)


def classify_progression(labels_t0: SegmentLabelSet, labels_t1: SegmentLabelSet) -> str:
    """Progressed if any segment crosses 50% upward or worsens by >= 20
    points; else improved if any segment drops by >= 20 points; else stable.
    Progression takes precedence over improvement."""
    progressed = False
    improved = False
    for seg in SEGMENTS:
        p0 = labels_t0.stenosis_pct(seg)
        p1 = labels_t1.stenosis_pct(seg)
        delta = p1 - p0
        if (p0 <= NEW_STENOSIS_CUT < p1) or delta >= PROGRESSION_DELTA:
            progressed = True
        elif delta <= -PROGRESSION_DELTA:
            improved = True
    if progressed:
        return "progressed"
    if improved:
        return "improved"
    return "stable"


@dataclass
class StudyPairObservation:
    patient_id: str
    embedding_t0: np.ndarray
    embedding_t1: np.ndarray
    labels_t0: SegmentLabelSet
    labels_t1: SegmentLabelSet
    pci_between: bool = False


@dataclass
class ProgressionReport:
    distances: Dict[str, List[float]]
    means: Dict[str, Optional[float]]
    intervals: Dict[str, Optional[BootstrapResult]]
    tests: Dict[str, Optional[WelchResult]]
    notes: List[str]


def progression_report(
    pairs: Sequence[StudyPairObservation],
    n_bootstrap: int = 1000,
    seed: int = 0,
) -> ProgressionReport:
    """Group pair distances by progression status; report means, patient-level
    bootstrap CIs, and Welch tests of stable vs improved / progressed."""
    if not pairs:
        raise ValidationError("no study pairs")
    distances: Dict[str, List[float]] = {s: [] for s in PROGRESSION_STATUSES}
    patients: Dict[str, List[str]] = {s: [] for s in PROGRESSION_STATUSES}
    for pair in pairs:
        status = classify_progression(pair.labels_t0, pair.labels_t1)
        distances[status].append(embedding_distance(pair.embedding_t0, pair.embedding_t1))
        patients[status].append(pair.patient_id)
    means: Dict[str, Optional[float]] = {}
    intervals: Dict[str, Optional[BootstrapResult]] = {}
    notes: List[str] = []
    for status in PROGRESSION_STATUSES:
        vals = distances[status]
        if not vals:
            means[status] = None
            intervals[status] = None
            notes.append(f"no {status} pairs")
            continue
        means[status] = float(np.mean(vals))
        samples = ScoredSamples(
            patient_ids=np.asarray(patients[status]),
            scores=np.asarray(vals),
        )
        intervals[status] = bootstrap_ci(
            lambda s: float(s.scores.mean()), samples, n_iter=n_bootstrap, seed=seed
        )
    tests: Dict[str, Optional[WelchResult]] = {}
    for other in ("improved", "progressed"):
        key = f"stable_vs_{other}"
        if len(distances["stable"]) >= 2 and len(distances[other]) >= 2:
            tests[key] = welch_t_test(distances["stable"], distances[other])
        else:
            tests[key] = None
            notes.append(f"{key}: skipped (needs >=2 pairs per group)")
    return ProgressionReport(distances, means, intervals, tests, notes)


# ---------------------------------------------------------------------------
# k-means / silhouette / PCA / purity
# ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: List[float]
    n_iter: int


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def kmeans(
    embeddings: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
) -> KMeansResult:
    """Seeded k-means++ initialization followed by Lloyd iterations. Inertia
    is non-increasing per iteration (asserted). An emptied cluster is reseeded
    to the point farthest from its centroid, deterministically."""
    x = require_finite(embeddings, "embeddings")
    if x.ndim != 2:
        raise ValidationError("embeddings must be 2-d")
    n = x.shape[0]
    if not (1 <= k <= n):
        raise ValidationError(f"k={k} must lie in [1, n={n}]")
    rng = Rng(seed).derive("kmeans")
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(0, n))
    centers[0] = x[first]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[j] = x[int(rng.integers(0, n))]
            continue
        r = float(rng.uniform()) * total
        idx = int(np.searchsorted(np.cumsum(closest), r))
        idx = min(idx, n - 1)
        centers[j] = x[idx]
        closest = np.minimum(closest, ((x - centers[j]) ** 2).sum(axis=1))

    history: List[float] = []
    assignments = np.zeros(n, dtype=int)
    for it in range(max_iter):
        d2 = _sq_dists(x, centers)
        new_assign = d2.argmin(axis=1)
        inertia = float(d2[np.arange(n), new_assign].sum())
        if history and inertia > history[-1] + 1e-9:
            raise AssertionError("k-means inertia increased")
        history.append(inertia)
        if it > 0 and np.array_equal(new_assign, assignments):
            assignments = new_assign
            break
        assignments = new_assign
        point_cost = d2[np.arange(n), new_assign]
        for j in range(k):
            members = new_assign == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                # No point has this center as argmin, so moving it cannot
                # raise any current assignment cost.
                centers[j] = x[int(point_cost.argmax())]
    d2 = _sq_dists(x, centers)
    assignments = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), assignments].sum())
    return KMeansResult(assignments, centers, inertia, history, len(history))


def silhouette(embeddings: np.ndarray, assignments: Sequence[int]) -> float:
    """Mean silhouette score with Euclidean distance; singleton clusters
    contribute 0."""
    x = require_finite(embeddings, "embeddings")
    labels = np.asarray(assignments)
    if labels.shape[0] != x.shape[0]:
        raise ValidationError("assignments length mismatch")
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValidationError("silhouette needs >= 2 clusters")
    diffs = x[:, None, :] - x[None, :, :]
    dists = np.sqrt((diffs**2).sum(axis=2))
    scores = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        own = labels == labels[i]
        n_own = own.sum()
        if n_own <= 1:
            scores[i] = 0.0
            continue
        a = dists[i, own].sum() / (n_own - 1)
        b = min(dists[i, labels == c].mean() for c in uniq if c != labels[i])
        scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


@dataclass
class PCAResult:
    components: np.ndarray  # (n_components, dim), orthonormal rows
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray
    projected: np.ndarray  # (n, n_components)


def pca(embeddings: np.ndarray, n_components: int, max_iter: int = 1000) -> PCAResult:
    """Mean-centered PCA via power iteration with deflation.

    Each component is re-orthogonalized against the previous ones every
    iteration, so components are orthonormal to machine precision; explained
    variance ratios are non-increasing.
    """
    x = require_finite(embeddings, "embeddings")
    if x.ndim != 2:
        raise ValidationError("embeddings must be 2-d")
    n, d = x.shape
    if not (1 <= n_components <= min(n - 1, d)):
        raise ValidationError(
            f"n_components={n_components} must lie in [1, min(n-1, dim)={min(n - 1, d)}]"
        )
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (n - 1)
    total_var = float(np.trace(cov))
    comps = np.zeros((n_components, d))
    variances = np.zeros(n_components)
    deflated = cov.copy()
    for j in range(n_components):
        start = int(np.argmax((deflated**2).sum(axis=0)))
        v = deflated[:, start].copy()
        if np.linalg.norm(v) == 0:
            v = np.zeros(d)
            v[j % d] = 1.0
        v -= comps[:j].T @ (comps[:j] @ v)
        nv = np.linalg.norm(v)
        v = v / nv if nv > 0 else np.eye(d)[j % d]
        for _ in range(max_iter):
            w = deflated @ v
            w -= comps[:j].T @ (comps[:j] @ w)
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            w /= norm
            if abs(abs(w @ v) - 1.0) < 1e-14:
                v = w
                break
            v = w
        variances[j] = float(v @ cov @ v)
        comps[j] = v
        deflated -= variances[j] * np.outer(v, v)
    ratios = variances / total_var if total_var > 0 else np.zeros(n_components)
    return PCAResult(
        components=comps,
        explained_variance=variances,
        explained_variance_ratio=ratios,
        mean=mean,
        projected=xc @ comps.T,
    )


def cluster_purity(assignments: Sequence[int], categories: Sequence) -> Dict[int, float]:
    """Per cluster, the fraction held by the modal category."""
    labels = np.asarray(assignments)
    cats = np.asarray(categories)
    if labels.shape != cats.shape:
        raise ValidationError("assignments/categories length mismatch")
    if labels.size == 0:
        raise ValidationError("empty cluster assignment")
    out: Dict[int, float] = {}
    for c in np.unique(labels):
        members = cats[labels == c]
        _, counts = np.unique(members, return_counts=True)
        out[int(c)] = float(counts.max() / members.size)
    return out
