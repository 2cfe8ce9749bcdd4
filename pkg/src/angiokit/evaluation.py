"""Study-level evaluation: run the trained model over a split and produce
metric reports (AUROC/AUPRC/operating point per binary task, MAE/Pearson for
stenosis regression) with patient-level bootstrap confidence intervals,
globally and per territory.

"Global" pools every (study, segment) pair (micro convention); the macro
variant (mean of per-segment metrics) is reported alongside because the two
differ in general.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import UndefinedMetricError, ValidationError
from .evalstats import (
    MetricReport,
    ScoredSamples,
    auprc,
    auroc,
    bootstrap_ci,
    micro_average,
    regression_metrics,
    youden_operating_point,
)
from .milhead import BINARY_TASKS, TrainedHeadModel, cohort_tensors, predict_batch
from .types import Cohort, SEGMENTS, territory_of

SCOPES = ("global", "LCA", "RCA")


@dataclass
class EvalTables:
    """Raw per-(study, segment) prediction arrays for one split."""

    patient_ids: np.ndarray  # (B,)
    study_ids: np.ndarray
    dominances: np.ndarray
    stenosis_pred: np.ndarray  # (B, 18) percent, unclamped
    stenosis_target: np.ndarray
    logits: Dict[str, np.ndarray]  # task -> (B, 18)
    labels: Dict[str, np.ndarray]


def predict_split(cohort: Cohort, model: TrainedHeadModel, split: str = "test") -> EvalTables:
    studies = cohort.studies_in_split(split) if cohort.split else list(cohort.studies)
    if not studies:
        raise ValidationError(f"no studies in split {split!r}")
    tensors = cohort_tensors(cohort, studies, model.pooling_config, "inference")
    preds, _ = predict_batch(model, tensors.embeddings, tensors.mask, tensors.view_ids)
    return EvalTables(
        patient_ids=np.asarray(tensors.patient_ids),
        study_ids=np.asarray(tensors.study_ids),
        dominances=np.asarray([s.dominance for s in studies]),
        stenosis_pred=preds["stenosis_pct"],
        stenosis_target=tensors.targets["stenosis_pct"],
        logits={t: preds[f"logits_{t}"] for t in BINARY_TASKS},
        labels={t: tensors.targets[t].astype(bool) for t in BINARY_TASKS},
    )


def _scope_mask(tables: EvalTables, scope: str) -> np.ndarray:
    """(B, 18) membership mask; territory membership is dominance-dependent."""
    b = tables.patient_ids.size
    if scope == "global":
        return np.ones((b, len(SEGMENTS)), dtype=bool)
    out = np.zeros((b, len(SEGMENTS)), dtype=bool)
    for i, dom in enumerate(tables.dominances):
        out[i] = [territory_of(s, dom) == scope for s in SEGMENTS]
    return out


def _samples(
    tables: EvalTables, scores: np.ndarray, labels: Optional[np.ndarray],
    targets: Optional[np.ndarray], scope: str,
) -> ScoredSamples:
    keep = _scope_mask(tables, scope)
    patient_grid = np.repeat(tables.patient_ids[:, None], len(SEGMENTS), axis=1)
    segment_grid = np.tile(np.asarray(SEGMENTS), (tables.patient_ids.size, 1))
    return ScoredSamples(
        patient_ids=patient_grid[keep],
        scores=scores[keep],
        labels=None if labels is None else labels[keep],
        targets=None if targets is None else targets[keep],
        segment_ids=segment_grid[keep],
    )


def _report(name, metric, samples, n_bootstrap, seed) -> MetricReport:
    n = len(samples)
    n_abnormal = int(samples.labels.sum()) if samples.labels is not None else 0
    try:
        if n_bootstrap > 0:
            boot = bootstrap_ci(metric, samples, n_iter=n_bootstrap, seed=seed)
            return MetricReport(
                name=name, value=boot.point, ci_lo=boot.lo, ci_hi=boot.hi, n=n,
                n_abnormal=n_abnormal, undefined_replicates=boot.undefined_replicates,
            )
        return MetricReport(name=name, value=float(metric(samples)), n=n, n_abnormal=n_abnormal)
    except UndefinedMetricError as exc:
        return MetricReport(name=name, value=None, n=n, n_abnormal=n_abnormal, note=str(exc))


def evaluate_tables(
    tables: EvalTables, n_bootstrap: int = 1000, seed: int = 0
) -> Dict[str, Dict[str, dict]]:
    """Nested {task: {scope: {metric: MetricReport-json}}} structure."""
    out: Dict[str, Dict[str, dict]] = {}
    for task in BINARY_TASKS:
        per_scope: Dict[str, dict] = {}
        for scope in SCOPES:
            samples = _samples(tables, tables.logits[task], tables.labels[task], None, scope)
            seed_scope = (seed, task, scope)
            reports = {
                "auroc": _report("auroc", auroc, samples, n_bootstrap, _mix(seed_scope, 1)),
                "auprc": _report("auprc", auprc, samples, n_bootstrap, _mix(seed_scope, 2)),
            }
            macro = _macro(samples, auroc)
            entry = {k: v.to_json() for k, v in reports.items()}
            entry["auroc_macro"] = macro
            entry["operating_point"] = _operating_point_json(samples)
            per_scope[scope] = entry
        out[task] = per_scope

    per_scope = {}
    for scope in SCOPES:
        samples = _samples(
            tables, tables.stenosis_pred, None, tables.stenosis_target, scope
        )
        seed_scope = (seed, "regression", scope)

        def mae_metric(s: ScoredSamples) -> float:
            return float(np.abs(s.scores - s.targets).mean())

        def pearson_metric(s: ScoredSamples) -> float:
            r = regression_metrics(s.scores, s.targets).pearson_r
            if r is None:
                raise UndefinedMetricError("zero-variance Pearson replicate")
            return r

        per_scope[scope] = {
            "mae": _report("mae", mae_metric, samples, n_bootstrap, _mix(seed_scope, 1)).to_json(),
            "pearson_r": _report(
                "pearson_r", pearson_metric, samples, n_bootstrap, _mix(seed_scope, 2)
            ).to_json(),
        }
    out["stenosis_regression"] = per_scope
    return out


def _mix(parts, salt: int) -> int:
    from .numerics import splitmix64

    state = salt
    for p in parts:
        if isinstance(p, str):
            for b in p.encode():
                state = splitmix64(state ^ b)
        else:
            state = splitmix64(state ^ int(p))
    return state


def _macro(samples: ScoredSamples, metric) -> Optional[dict]:
    by_segment: Dict[str, ScoredSamples] = {}
    for seg in np.unique(samples.segment_ids):
        idx = np.flatnonzero(samples.segment_ids == seg)
        by_segment[str(seg)] = samples.take(idx)
    try:
        res = micro_average(by_segment, metric)
    except UndefinedMetricError:
        return None
    return {
        "micro": res["micro"],
        "macro": res["macro"],
        "macro_skipped_segments": res["macro_skipped_segments"],
    }


def _operating_point_json(samples: ScoredSamples) -> Optional[dict]:
    try:
        op = youden_operating_point(samples)
    except UndefinedMetricError:
        return None
    return {
        "threshold": op.threshold,
        "sensitivity": op.sensitivity,
        "specificity": op.specificity,
        "ppv": op.ppv,
        "npv": op.npv,
        "youden_j": op.youden_j,
    }


def metrics_csv_rows(metrics: Dict[str, Dict[str, dict]]) -> List[List[str]]:
    """Flatten the nested metrics dict into CSV rows."""
    rows = [["task", "scope", "metric", "value", "ci_lo", "ci_hi", "n", "n_abnormal",
             "undefined_replicates"]]

    def fmt(x):
        return "" if x is None else repr(x) if isinstance(x, float) else str(x)

    for task in sorted(metrics):
        for scope in sorted(metrics[task]):
            for metric_name, payload in sorted(metrics[task][scope].items()):
                if payload is None:
                    continue
                if "value" in payload:
                    rows.append([
                        task, scope, metric_name, fmt(payload["value"]),
                        fmt(payload.get("ci_lo")), fmt(payload.get("ci_hi")),
                        fmt(payload.get("n", "")), fmt(payload.get("n_abnormal", "")),
                        fmt(payload.get("undefined_replicates", "")),
                    ])
                else:
                    for sub, val in sorted(payload.items()):
                        if isinstance(val, (int, float)) or val is None:
                            rows.append([task, scope, f"{metric_name}.{sub}",
                                         fmt(val), "", "", "", "", ""])
    return rows
