"""Evaluation statistics: AUROC/AUPRC, Youden operating point, regression
metrics, patient-level bootstrap CIs, DeLong AUROC comparison, Welch t-test,
micro/macro averaging, and risk tertiles.

Conventions (documented once, applied everywhere):
  * a sample is predicted positive iff score >= threshold;
  * quantiles use the nearest-rank method: the value at 0-based index
    ceil(p*n) - 1 of the sorted data, i.e. inf{x : F_hat(x) >= p};
  * undefined metrics (single-class replicates, zero-variance Pearson) carry
    an explicit flag or raise UndefinedMetricError, never a silent 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as _scipy_stats

from .errors import UndefinedMetricError, ValidationError
from .numerics import Rng


@dataclass
class ScoredSamples:
    """Columnar (patient, segment, score, label/target) evaluation set."""

    patient_ids: np.ndarray
    scores: np.ndarray
    labels: Optional[np.ndarray] = None  # bool, classification
    targets: Optional[np.ndarray] = None  # float, regression
    segment_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.patient_ids = np.asarray(self.patient_ids)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError("scores contain non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=bool)
            if self.labels.shape != self.scores.shape:
                raise ValidationError("labels/scores length mismatch")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if self.targets.shape != self.scores.shape:
                raise ValidationError("targets/scores length mismatch")
        if self.segment_ids is not None:
            self.segment_ids = np.asarray(self.segment_ids)
        if self.patient_ids.shape != self.scores.shape:
            raise ValidationError("patient_ids/scores length mismatch")

    def __len__(self):
        return self.scores.size

    def take(self, idx: np.ndarray) -> "ScoredSamples":
        return ScoredSamples(
            patient_ids=self.patient_ids[idx],
            scores=self.scores[idx],
            labels=None if self.labels is None else self.labels[idx],
            targets=None if self.targets is None else self.targets[idx],
            segment_ids=None if self.segment_ids is None else self.segment_ids[idx],
        )


def _require_both_classes(labels: np.ndarray, what: str) -> None:
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise UndefinedMetricError(f"undefined {what}: needs both classes")


def auroc(samples: ScoredSamples) -> float:
    """Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5 P(tie).

    Exact pair counting for small problems, midrank formula otherwise; the
    two agree identically (midranks are just a faster pair count).
    """
    if samples.labels is None:
        raise ValidationError("auroc needs labels")
    labels = samples.labels
    _require_both_classes(labels, "AUROC")
    pos = samples.scores[labels]
    neg = samples.scores[~labels]
    if pos.size * neg.size <= 10_000:
        wins = (pos[:, None] > neg[None, :]).sum()
        ties = (pos[:, None] == neg[None, :]).sum()
        return float((wins + 0.5 * ties) / (pos.size * neg.size))
    ranks = _scipy_stats.rankdata(samples.scores)  # midranks
    r_pos = ranks[labels].sum()
    u = r_pos - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def auprc(samples: ScoredSamples) -> float:
    """Average precision: mean of precision at each positive's rank.

    Ties are broken by a stable sort on descending score, preserving input
    order among equal scores.
    """
    if samples.labels is None:
        raise ValidationError("auprc needs labels")
    labels = samples.labels
    if not labels.any():
        raise UndefinedMetricError("undefined AUPRC: no positives")
    order = np.argsort(-samples.scores, kind="stable")
    sorted_labels = labels[order]
    cum_pos = np.cumsum(sorted_labels)
    ranks = np.arange(1, labels.size + 1)
    precision_at_pos = cum_pos[sorted_labels] / ranks[sorted_labels]
    # fsum: exactly-rounded sum, so independent implementations agree bitwise
    return math.fsum(precision_at_pos) / precision_at_pos.size


@dataclass
class OperatingPoint:
    threshold: float
    sensitivity: float
    specificity: float
    ppv: Optional[float]  # None when no positive predictions (0/0)
    npv: Optional[float]
    youden_j: float


def youden_operating_point(samples: ScoredSamples) -> OperatingPoint:
    """Threshold at each distinct score maximizing J = sens + spec - 1;
    ties on J resolved toward the lowest threshold."""
    if samples.labels is None:
        raise ValidationError("youden needs labels")
    labels = samples.labels
    _require_both_classes(labels, "operating point")
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    best = None
    for t in np.unique(samples.scores):  # ascending, so ties keep lowest t
        pred = samples.scores >= t
        tp = int((pred & labels).sum())
        fp = int((pred & ~labels).sum())
        fn = int(n_pos - tp)
        tn = int(n_neg - fp)
        sens = tp / n_pos
        spec = tn / n_neg
        j = sens + spec - 1.0
        if best is None or j > best[0] + 1e-15:
            ppv = tp / (tp + fp) if (tp + fp) > 0 else None
            npv = tn / (tn + fn) if (tn + fn) > 0 else None
            best = (j, OperatingPoint(float(t), sens, spec, ppv, npv, j))
    return best[1]


@dataclass
class RegressionMetrics:
    mae: float
    pearson_r: Optional[float]  # None when either side has zero variance


def regression_metrics(preds: Sequence[float], targets: Sequence[float]) -> RegressionMetrics:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValidationError("preds/targets length mismatch")
    if preds.size == 0:
        raise ValidationError("empty regression input")
    mae = float(np.abs(preds - targets).mean())
    r: Optional[float] = None
    if preds.size >= 2:
        sp = preds - preds.mean()
        st = targets - targets.mean()
        denom = math.sqrt(float(sp @ sp) * float(st @ st))
        if denom > 0:
            r = float(np.clip((sp @ st) / denom, -1.0, 1.0))
    return RegressionMetrics(mae=mae, pearson_r=r)


def _nearest_rank(sorted_vals: np.ndarray, p: float) -> float:
    idx = max(0, min(sorted_vals.size - 1, math.ceil(p * sorted_vals.size) - 1))
    return float(sorted_vals[idx])


@dataclass
class BootstrapResult:
    point: float
    lo: float
    hi: float
    n_iter: int
    undefined_replicates: int
    contains_point: bool


def bootstrap_ci(
    metric: Callable[[ScoredSamples], float],
    samples: ScoredSamples,
    n_iter: int = 1000,
    seed: int = 0,
    resample_unit: str = "patient",
) -> BootstrapResult:
    """95% percentile interval from resampling patients with replacement.

    Replicates where the metric is undefined are skipped and counted. The
    replicate stream is derived per-iteration from the seed, so concurrent
    and serial evaluation produce bit-identical intervals.
    """
    if resample_unit not in ("patient", "sample"):
        raise ValidationError(f"unknown resample unit {resample_unit!r}")
    if len(samples) == 0:
        raise ValidationError("empty sample set")
    point = metric(samples)
    if resample_unit == "patient":
        units = np.unique(samples.patient_ids)
        index_of: Dict = {u: np.flatnonzero(samples.patient_ids == u) for u in units}
    else:
        units = np.arange(len(samples))
        index_of = {i: np.array([i]) for i in units}
    root = Rng(seed)
    values: List[float] = []
    undefined = 0
    for it in range(n_iter):
        rng = root.derive("bootstrap", it)
        chosen = rng.integers(0, len(units), size=len(units))
        idx = np.concatenate([index_of[units[c]] for c in chosen])
        try:
            values.append(metric(samples.take(idx)))
        except UndefinedMetricError:
            undefined += 1
    if not values:
        raise UndefinedMetricError("all bootstrap replicates undefined")
    vals = np.sort(np.asarray(values))
    lo = _nearest_rank(vals, 0.025)
    hi = _nearest_rank(vals, 0.975)
    return BootstrapResult(
        point=float(point),
        lo=lo,
        hi=hi,
        n_iter=n_iter,
        undefined_replicates=undefined,
        contains_point=bool(lo <= point <= hi),
    )


@dataclass
class DeLongResult:
    auc_a: float
    auc_b: float
    z: float
    p_two_sided: float
    var: float


def _structural_components(scores: np.ndarray, labels: np.ndarray):
    pos = scores[labels]
    neg = scores[~labels]
    # psi(x, y) = 1 if x > y, 0.5 if tie, 0 otherwise
    cmp = (pos[:, None] > neg[None, :]).astype(np.float64)
    cmp += 0.5 * (pos[:, None] == neg[None, :])
    v10 = cmp.mean(axis=1)  # per positive
    v01 = cmp.mean(axis=0)  # per negative
    return float(cmp.mean()), v10, v01


def delong_test(
    scores_a: Sequence[float], scores_b: Sequence[float], labels: Sequence[bool]
) -> DeLongResult:
    """DeLong comparison of two correlated AUROCs via structural components."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if a.shape != b.shape or a.shape != labels.shape:
        raise ValidationError("delong inputs must have identical length")
    _require_both_classes(labels, "DeLong test")
    auc_a, v10_a, v01_a = _structural_components(a, labels)
    auc_b, v10_b, v01_b = _structural_components(b, labels)
    m, n = v10_a.size, v01_a.size

    def _cov(x, y):
        if x.size < 2:
            return 0.0
        return float(((x - x.mean()) @ (y - y.mean())) / (x.size - 1))

    var = (
        _cov(v10_a, v10_a) + _cov(v10_b, v10_b) - 2 * _cov(v10_a, v10_b)
    ) / m + (_cov(v01_a, v01_a) + _cov(v01_b, v01_b) - 2 * _cov(v01_a, v01_b)) / n
    diff = auc_a - auc_b
    if var <= 0:
        if diff == 0:
            return DeLongResult(auc_a, auc_b, 0.0, 1.0, 0.0)
        return DeLongResult(auc_a, auc_b, math.copysign(math.inf, diff), 0.0, 0.0)
    z = diff / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return DeLongResult(auc_a, auc_b, float(z), float(p), float(var))


@dataclass
class WelchResult:
    t: float
    df: Optional[float]
    p_two_sided: float
    degenerate: bool  # zero variance in both groups


def welch_t_test(group_a: Sequence[float], group_b: Sequence[float]) -> WelchResult:
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValidationError("welch test needs >=2 samples per group")
    va = float(a.var(ddof=1))
    vb = float(b.var(ddof=1))
    diff = float(a.mean() - b.mean())
    se2 = va / a.size + vb / b.size
    if se2 == 0.0:
        if diff == 0.0:
            return WelchResult(0.0, None, 1.0, True)
        return WelchResult(math.copysign(math.inf, diff), None, 0.0, True)
    t = diff / math.sqrt(se2)
    df = se2**2 / (
        (va / a.size) ** 2 / (a.size - 1) + (vb / b.size) ** 2 / (b.size - 1)
    )
    p = 2.0 * float(_scipy_stats.t.sf(abs(t), df))
    return WelchResult(float(t), float(df), p, False)


def micro_average(
    samples_by_segment: Dict[str, ScoredSamples],
    metric: Callable[[ScoredSamples], float],
) -> Dict[str, object]:
    """Micro (pooled pairs) and macro (mean of per-segment values) variants.

    Micro is the headline number; macro is reported alongside and undefined
    segments are skipped with a count.
    """
    if not samples_by_segment:
        raise ValidationError("no segments to average")
    pooled = _concat_samples(list(samples_by_segment.values()))
    micro = metric(pooled)
    per_segment: Dict[str, Optional[float]] = {}
    values = []
    skipped = 0
    for seg in sorted(samples_by_segment):
        try:
            v = metric(samples_by_segment[seg])
            per_segment[seg] = v
            values.append(v)
        except UndefinedMetricError:
            per_segment[seg] = None
            skipped += 1
    macro = float(np.mean(values)) if values else None
    return {
        "micro": float(micro),
        "macro": macro,
        "macro_skipped_segments": skipped,
        "per_segment": per_segment,
    }


def _concat_samples(parts: List[ScoredSamples]) -> ScoredSamples:
    def cat(attr):
        vals = [getattr(p, attr) for p in parts]
        if any(v is None for v in vals):
            return None
        return np.concatenate(vals)

    return ScoredSamples(
        patient_ids=np.concatenate([p.patient_ids for p in parts]),
        scores=np.concatenate([p.scores for p in parts]),
        labels=cat("labels"),
        targets=cat("targets"),
        segment_ids=cat("segment_ids"),
    )


@dataclass
class TertileResult:
    assignments: np.ndarray  # "low" | "intermediate" | "high"
    cuts: Tuple[float, float]
    event_rates: Dict[str, Optional[float]]
    counts: Dict[str, int]


def risk_tertiles(probabilities: Sequence[float], events: Sequence[bool]) -> TertileResult:
    """Tertile grouping at the 33.3/66.7 percentiles of predicted probability;
    ties at a cut go to the lower group."""
    p = np.asarray(probabilities, dtype=np.float64)
    e = np.asarray(events, dtype=bool)
    if p.size < 3:
        raise ValidationError("risk tertiles need >= 3 samples")
    if p.shape != e.shape:
        raise ValidationError("probabilities/events length mismatch")
    if not np.all(np.isfinite(p)):
        raise ValidationError("probabilities contain non-finite values")
    sorted_p = np.sort(p)
    c1 = _nearest_rank(sorted_p, 1.0 / 3.0)
    c2 = _nearest_rank(sorted_p, 2.0 / 3.0)
    groups = np.where(p <= c1, "low", np.where(p <= c2, "intermediate", "high"))
    rates: Dict[str, Optional[float]] = {}
    counts: Dict[str, int] = {}
    for g in ("low", "intermediate", "high"):
        idx = groups == g
        counts[g] = int(idx.sum())
        rates[g] = float(e[idx].mean()) if idx.any() else None
    return TertileResult(assignments=groups, cuts=(c1, c2), event_rates=rates, counts=counts)


@dataclass
class MetricReport:
    """Serializable metric value with CI and sample accounting."""

    name: str
    value: Optional[float]
    ci_lo: Optional[float] = None
    ci_hi: Optional[float] = None
    n: int = 0
    n_abnormal: int = 0
    undefined_replicates: int = 0
    note: str = ""

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "n": self.n,
            "n_abnormal": self.n_abnormal,
            "undefined_replicates": self.undefined_replicates,
            "note": self.note,
        }
