"""Domain data model: coronary segments, label sets, video/study records,
cohorts.

The 18-segment scheme splits mid/distal circumflex and counts ramus and both
obtuse marginals separately, so there are always exactly 18 segments. The
posterior descending artery, posterolateral branch, left ventricular
posterior, and distal circumflex shift territory with coronary dominance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ValidationError

SEGMENTS: Tuple[str, ...] = (
    "left_main",
    "prox_lad",
    "mid_lad",
    "dist_lad",
    "d1",
    "d2",
    "ramus",
    "prox_lcx",
    "mid_lcx",
    "dist_lcx",
    "lvp",
    "om1",
    "om2",
    "prox_rca",
    "mid_rca",
    "dist_rca",
    "pda",
    "posterolateral",
)
SEGMENT_INDEX = {s: i for i, s in enumerate(SEGMENTS)}

CALCIFICATION_GRADES: Tuple[str, ...] = ("none", "mild", "moderate", "severe")
DOMINANCE_VALUES: Tuple[str, ...] = ("right", "left", "co")
EQUIPMENT_VALUES: Tuple[str, ...] = ("none", "wire", "device")
ARTERY_VALUES: Tuple[str, ...] = ("LCA", "RCA", "other")
TERRITORIES: Tuple[str, ...] = ("LCA", "RCA")
PHASES: Tuple[str, ...] = ("diagnostic", "interventional", "post_procedural")
SPLITS: Tuple[str, ...] = ("train", "val", "test")

VIEW_CLASSES: Tuple[str, ...] = (
    "RAO_Cranial",
    "AP_Cranial",
    "LAO_Cranial",
    "RAO_Straight",
    "AP",
    "RAO_Caudal",
    "AP_Caudal",
    "LAO_Caudal",
    "LAO_Straight",
    "LAO_Lateral",
    "RAO_Lateral",
    "Other",
)

# Base territory split under right/co dominance: PDA and posterolateral come
# off the RCA. Left dominance moves both to the circumflex (LCA) side and the
# RCA territory ends at its distal segment.
_BASE_RCA = ("prox_rca", "mid_rca", "dist_rca", "pda", "posterolateral")


def territory_of(segment: str, dominance: str) -> str:
    if segment not in SEGMENT_INDEX:
        raise ValidationError(f"unknown segment {segment!r}", code="unknown_segment")
    if dominance not in DOMINANCE_VALUES:
        raise ValidationError(f"unknown dominance {dominance!r}", code="unknown_dominance")
    if dominance == "left" and segment in ("pda", "posterolateral"):
        return "LCA"
    return "RCA" if segment in _BASE_RCA else "LCA"


def territory_segments(territory: str, dominance: str) -> Tuple[str, ...]:
    if territory not in TERRITORIES:
        raise ValidationError(f"unknown territory {territory!r}", code="unknown_territory")
    return tuple(s for s in SEGMENTS if territory_of(s, dominance) == territory)


# Significant stenosis cut: >=70% diameter reduction, >=50% for left main.
STENOSIS_SIGNIFICANT_PCT = 70.0
LEFT_MAIN_SIGNIFICANT_PCT = 50.0


def stenosis_threshold(segment: str) -> float:
    return LEFT_MAIN_SIGNIFICANT_PCT if segment == "left_main" else STENOSIS_SIGNIFICANT_PCT


@dataclass(frozen=True)
class SegmentFinding:
    """Findings for one segment. cto=True forces stenosis 100 at creation."""

    stenosis_pct: Optional[float] = None
    calcification: str = "none"
    thrombus: bool = False
    cto: bool = False

    @staticmethod
    def create(stenosis_pct=None, calcification="none", thrombus=False, cto=False) -> "SegmentFinding":
        if calcification not in CALCIFICATION_GRADES:
            raise ValidationError(
                f"unknown calcification grade {calcification!r}", code="unknown_grade"
            )
        if cto:
            stenosis_pct = 100.0
        if stenosis_pct is not None:
            stenosis_pct = float(stenosis_pct)
            if not np.isfinite(stenosis_pct) or not (0.0 <= stenosis_pct <= 100.0):
                raise ValidationError(
                    f"stenosis percent {stenosis_pct} outside [0, 100]",
                    code="percent_out_of_range",
                )
        return SegmentFinding(stenosis_pct, calcification, bool(thrombus), bool(cto))


@dataclass
class SegmentLabelSet:
    """Per-segment findings; segments without a finding are unreported.

    Unreported segments count as 0% stenosis for regression targets and as
    negative for every binary task (reports omit normal segments).
    """

    findings: Dict[str, SegmentFinding] = field(default_factory=dict)

    def __post_init__(self):
        for seg in self.findings:
            if seg not in SEGMENT_INDEX:
                raise ValidationError(f"unknown segment {seg!r}", code="unknown_segment")

    def get(self, segment: str) -> SegmentFinding:
        return self.findings.get(segment, SegmentFinding())

    def set(self, segment: str, finding: SegmentFinding) -> None:
        if segment not in SEGMENT_INDEX:
            raise ValidationError(f"unknown segment {segment!r}", code="unknown_segment")
        self.findings[segment] = finding

    def restrict(self, segments) -> "SegmentLabelSet":
        keep = set(segments)
        return SegmentLabelSet({s: f for s, f in self.findings.items() if s in keep})

    def merged_with(self, other: "SegmentLabelSet") -> "SegmentLabelSet":
        out = dict(self.findings)
        out.update(other.findings)
        return SegmentLabelSet(out)

    def stenosis_pct(self, segment: str) -> float:
        pct = self.get(segment).stenosis_pct
        return 0.0 if pct is None else pct

    def stenosis_vector(self) -> np.ndarray:
        return np.array([self.stenosis_pct(s) for s in SEGMENTS], dtype=np.float64)


def derive_binary_labels(labels: SegmentLabelSet) -> Dict[str, Dict[str, bool]]:
    """Binary task labels per segment: significant stenosis (segment-specific
    cut), significant calcification (moderate or severe), thrombus, CTO."""
    out: Dict[str, Dict[str, bool]] = {}
    for seg in SEGMENTS:
        f = labels.get(seg)
        pct = 0.0 if f.stenosis_pct is None else f.stenosis_pct
        out[seg] = {
            "stenosis_significant": pct >= stenosis_threshold(seg),
            "calcif_significant": f.calcification in ("moderate", "severe"),
            "thrombus": f.thrombus,
            "cto": f.cto,
        }
    return out


@dataclass
class VideoRecord:
    video_id: str
    acquired_at: float
    primary_angle_deg: float
    secondary_angle_deg: float
    fps: float
    frame_count: int
    contrast: bool
    equipment: str
    artery: str
    view_class: Optional[str] = None
    phase: Optional[str] = None
    embedding_ref: Optional[int] = None
    embedding: Optional[np.ndarray] = None

    def validate(self) -> None:
        if self.fps <= 0:
            raise ValidationError(f"video {self.video_id}: fps must be > 0")
        if self.frame_count < 1:
            raise ValidationError(f"video {self.video_id}: frame_count must be >= 1")
        for name in ("primary_angle_deg", "secondary_angle_deg", "acquired_at"):
            if not np.isfinite(getattr(self, name)):
                raise ValidationError(f"video {self.video_id}: {name} not finite")
        if self.equipment not in EQUIPMENT_VALUES:
            raise ValidationError(
                f"video {self.video_id}: unknown equipment {self.equipment!r}"
            )
        if self.artery not in ARTERY_VALUES:
            raise ValidationError(f"video {self.video_id}: unknown artery {self.artery!r}")

    def with_(self, **kw) -> "VideoRecord":
        return replace(self, **kw)


@dataclass
class StudyRecord:
    study_id: str
    patient_id: str
    dominance: str
    videos: List[VideoRecord]
    report_text: Dict[str, str] = field(default_factory=dict)
    labels: Optional[Dict[str, SegmentLabelSet]] = None

    def validate(self, require_complete: bool = True) -> None:
        if self.dominance not in DOMINANCE_VALUES:
            raise ValidationError(
                f"study {self.study_id}: unknown dominance {self.dominance!r}",
                code="unknown_dominance",
            )
        for v in self.videos:
            v.validate()
        times = [v.acquired_at for v in self.videos]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValidationError(
                f"study {self.study_id}: videos not ordered by acquired_at",
                code="unsorted_study",
            )
        if require_complete:
            has = {a: False for a in TERRITORIES}
            for v in self.videos:
                if v.contrast and v.artery in has:
                    has[v.artery] = True
            if not all(has.values()):
                raise ValidationError(
                    f"incomplete study {self.study_id}: needs >=1 LCA and >=1 RCA contrast video",
                    code="incomplete_study",
                )

    def full_labels(self) -> Optional[SegmentLabelSet]:
        if self.labels is None:
            return None
        merged = SegmentLabelSet()
        for territory in sorted(self.labels):
            merged = merged.merged_with(self.labels[territory])
        return merged


@dataclass
class Cohort:
    studies: List[StudyRecord]
    split: Dict[str, str] = field(default_factory=dict)  # patient_id -> train|val|test
    embeddings: Optional[np.ndarray] = None  # row-indexed by embedding_ref
    dim: int = 512
    generator: Optional[dict] = None  # synthetic ground-truth bookkeeping

    def patients(self) -> List[str]:
        seen: Dict[str, None] = {}
        for s in self.studies:
            seen.setdefault(s.patient_id, None)
        return sorted(seen)

    def studies_in_split(self, split_name: str) -> List[StudyRecord]:
        if not self.split:
            raise ValidationError("cohort has no split assignments", code="no_split")
        return [s for s in self.studies if self.split.get(s.patient_id) == split_name]

    def embedding_for(self, video: VideoRecord) -> np.ndarray:
        if video.embedding is not None:
            return np.asarray(video.embedding, dtype=np.float64)
        if video.embedding_ref is None:
            raise ValidationError(
                f"video {video.video_id} has no embedding", code="missing_embedding"
            )
        if self.embeddings is None:
            raise ValidationError("cohort has no embedding store", code="missing_embedding")
        return np.asarray(self.embeddings[video.embedding_ref], dtype=np.float64)
