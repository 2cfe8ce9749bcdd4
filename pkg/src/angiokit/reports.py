"""Deterministic structured-report grammar.

One segment per line::

    <segment-alias> ":" <finding> ("," <finding>)*

where a finding is one of (keywords case-insensitive):

    INTEGER "%" ["stenosis"]            e.g. "70% stenosis"
    INTEGER "-" INTEGER "%" ["stenosis"]  range; mapped to its midpoint
    QUALITATIVE ["stenosis"]            normal|none|mild|moderate|severe|total occlusion
    "calcification" GRADE               GRADE in none|mild|moderate|severe
    "thrombus"
    "CTO"
    "significant"                       annotation emitted by the renderer; no-op

Numeric percent wins over a qualitative term on the same line; "CTO" forces
stenosis 100. Duplicate lines for one segment: last one wins, with a warning.
"""

from __future__ import annotations

import json
import re

import numpy as np
import warnings
from importlib import resources
from typing import Dict, Iterable, Mapping, Optional, Tuple

from .errors import ParseError, ValidationError
from .types import (
    SEGMENTS,
    SegmentFinding,
    SegmentLabelSet,
    stenosis_threshold,
    territory_segments,
)


class ReportWarning(UserWarning):
    """Non-fatal report irregularity (e.g. duplicate segment line)."""


QUALITATIVE_MAP: Dict[str, float] = {
    "normal": 0.0,
    "none": 0.0,
    "mild": 30.0,
    "moderate": 50.0,
    "severe": 70.0,
    "total occlusion": 100.0,
}


def map_qualitative(term: str) -> float:
    """Qualitative severity term -> percent stenosis."""
    key = " ".join(term.lower().split())
    if key not in QUALITATIVE_MAP:
        raise ValidationError(f"unmapped descriptor {term!r}", code="unmapped_descriptor")
    return QUALITATIVE_MAP[key]


def qualitative_for_percent(pct: float) -> str:
    """Inverse binning used to express a percent as a severity term."""
    if pct >= 100.0:
        return "total occlusion"
    if pct >= 70.0:
        return "severe"
    if pct >= 50.0:
        return "moderate"
    if pct >= 1.0:
        return "mild"
    return "normal"


def _load_synonyms() -> Tuple[Dict[str, str], Dict[str, str]]:
    raw = json.loads(
        resources.files("angiokit").joinpath("data/segment_synonyms.json").read_text()
    )
    alias_to_segment: Dict[str, str] = {}
    for segment, aliases in raw["aliases"].items():
        for alias in aliases:
            alias_to_segment[" ".join(alias.lower().split())] = segment
    for segment in SEGMENTS:
        alias_to_segment.setdefault(segment, segment)
        alias_to_segment.setdefault(segment.replace("_", " "), segment)
    return alias_to_segment, dict(raw["render_alias"])


_ALIAS_TO_SEGMENT, RENDER_ALIAS = _load_synonyms()

_RANGE_RE = re.compile(r"^(\d+)\s*[-–]\s*(\d+)\s*%$")
_PERCENT_RE = re.compile(r"^(\d+)\s*%$")


def resolve_segment_alias(alias: str) -> str:
    key = " ".join(alias.lower().split())
    if key not in _ALIAS_TO_SEGMENT:
        raise ValidationError(f"unknown segment alias {alias!r}", code="unknown_alias")
    return _ALIAS_TO_SEGMENT[key]


def _parse_finding(text: str, line_no: int, col: int, state: dict) -> None:
    item = " ".join(text.lower().split())
    if not item:
        raise ParseError("empty finding", line_no, col)
    if item == "significant":  # renderer annotation, derivable from percent
        return
    if item == "thrombus":
        state["thrombus"] = True
        return
    if item == "cto":
        state["cto"] = True
        return
    if item.startswith("calcification"):
        grade = item[len("calcification") :].strip()
        if grade not in ("none", "mild", "moderate", "severe"):
            raise ParseError(f"unknown calcification grade {grade!r}", line_no, col)
        state["calcification"] = grade
        return
    if item.endswith(" stenosis"):
        item = item[: -len(" stenosis")].strip()
    m = _RANGE_RE.match(item)
    if m:
        lo, hi = float(m.group(1)), float(m.group(2))
        if not (0 <= lo <= hi <= 100):
            raise ParseError(f"percent range {item!r} outside [0, 100]", line_no, col)
        state["pct_numeric"] = (lo + hi) / 2.0
        return
    m = _PERCENT_RE.match(item)
    if m:
        pct = float(m.group(1))
        if not (0 <= pct <= 100):
            raise ParseError(f"percent {pct:g} outside [0, 100]", line_no, col)
        state["pct_numeric"] = pct
        return
    if item in QUALITATIVE_MAP:
        state["pct_qualitative"] = QUALITATIVE_MAP[item]
        return
    raise ParseError(f"unrecognized finding {text.strip()!r}", line_no, col)


def parse_report(text: str, territory: str, dominance: str) -> SegmentLabelSet:
    """Parse territory report text into a SegmentLabelSet restricted to that
    territory's dominance-adjusted segment subset."""
    allowed = set(territory_segments(territory, dominance))
    labels = SegmentLabelSet()
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line:
            continue
        if ":" not in line:
            raise ParseError("expected '<segment>: <findings>'", line_no, 1)
        alias, _, rest = raw_line.partition(":")
        try:
            segment = resolve_segment_alias(alias)
        except ValidationError as exc:
            raise ParseError(str(exc), line_no, 1) from exc
        if segment not in allowed:
            raise ParseError(
                f"segment {segment!r} is not in the {territory} territory "
                f"under {dominance} dominance",
                line_no,
                1,
            )
        state: dict = {
            "pct_numeric": None,
            "pct_qualitative": None,
            "calcification": "none",
            "thrombus": False,
            "cto": False,
        }
        col = len(alias) + 2
        for chunk in rest.split(","):
            _parse_finding(chunk, line_no, col, state)
            col += len(chunk) + 1
        pct = state["pct_numeric"]
        if pct is None:
            pct = state["pct_qualitative"]
        finding = SegmentFinding.create(
            stenosis_pct=pct,
            calcification=state["calcification"],
            thrombus=state["thrombus"],
            cto=state["cto"],
        )
        if segment in labels.findings:
            warnings.warn(
                f"line {line_no}: duplicate findings for {segment}; keeping the last",
                ReportWarning,
                stacklevel=2,
            )
        labels.set(segment, finding)
    return labels


def render_labels(labels: SegmentLabelSet, segments: Optional[Iterable[str]] = None) -> str:
    """Render a label set as grammar-conforming text, one line per segment.

    Percentages are rounded to integers; re-parsing reproduces the stenosis
    values to the rounding unit and the binary labels exactly.
    """
    segments = tuple(segments) if segments is not None else SEGMENTS
    lines = []
    for seg in segments:
        if seg not in SEGMENTS:
            raise ValidationError(f"unknown segment {seg!r}", code="unknown_segment")
        f = labels.get(seg)
        pct = 0.0 if f.stenosis_pct is None else f.stenosis_pct
        if f.cto:
            pct = 100
        else:
            rounded = int(round(pct))
            # Threshold-faithful rounding: never let rounding push a
            # sub-threshold value across the significance cut.
            if pct < stenosis_threshold(seg) <= rounded:
                rounded = int(np.floor(pct))
            pct = rounded
        parts = [f"{pct}% stenosis"]
        if pct >= stenosis_threshold(seg):
            parts.append("significant")
        if f.calcification != "none":
            parts.append(f"calcification {f.calcification}")
        if f.thrombus:
            parts.append("thrombus")
        if f.cto:
            parts.append("CTO")
        lines.append(f"{RENDER_ALIAS[seg]}: " + ", ".join(parts))
    return "\n".join(lines) + "\n"


DEFAULT_PROBABILITY_THRESHOLDS: Mapping[str, float] = {
    "calcification": 0.5,
    "thrombus": 0.5,
    "cto": 0.5,
}


def prediction_to_labels(
    prediction: Mapping[str, Mapping[str, float]],
    thresholds: Optional[Mapping[str, float]] = None,
    segments: Optional[Iterable[str]] = None,
) -> SegmentLabelSet:
    """Threshold per-segment model outputs into a SegmentLabelSet.

    ``prediction[segment]`` needs ``stenosis_pct`` plus probabilities
    ``calcification``/``thrombus``/``cto``. A firing CTO flag coerces the
    rendered stenosis to 100% so the derived labels stay self-consistent.
    """
    thr = dict(DEFAULT_PROBABILITY_THRESHOLDS)
    if thresholds:
        thr.update(thresholds)
    segments = tuple(segments) if segments is not None else SEGMENTS
    missing = [s for s in segments if s not in prediction]
    if missing:
        raise ValidationError(
            f"incomplete prediction: missing {missing}", code="incomplete_prediction"
        )
    labels = SegmentLabelSet()
    for seg in segments:
        p = prediction[seg]
        cto = float(p.get("cto", 0.0)) >= thr["cto"]
        pct = min(100.0, max(0.0, float(p["stenosis_pct"])))
        labels.set(
            seg,
            SegmentFinding.create(
                stenosis_pct=100.0 if cto else pct,
                calcification=(
                    "moderate"
                    if float(p.get("calcification", 0.0)) >= thr["calcification"]
                    else "none"
                ),
                thrombus=float(p.get("thrombus", 0.0)) >= thr["thrombus"],
                cto=cto,
            ),
        )
    return labels


def render_report(
    prediction: Mapping[str, Mapping[str, float]],
    thresholds: Optional[Mapping[str, float]] = None,
    segments: Optional[Iterable[str]] = None,
) -> str:
    """Render model predictions as a templated clinical report."""
    return render_labels(
        prediction_to_labels(prediction, thresholds, segments), segments=segments
    )
