"""Turn raw per-study video lists into model input: classify projection
views from gantry angles, assign per-artery procedural phases, select up to
10 diagnostic videos, and pair videos with territory reports.

View angle bands (primary axis, degrees; negative = RAO, positive = LAO):

    band          interval     boundary ownership
    RAO lateral   [-110, -70]  closed both ends (isolated band)
    RAO           [-45, -15)   outer bound closed, inner open
    center (AP)   [-15, 15]    closed both ends
    LAO           (15, 45]     inner open, outer closed
    LAO lateral   [70, 110]    closed both ends (isolated band)

The secondary axis uses the same mirrored ownership: Caudal [-45, -15),
straight [-15, 15], Cranial (15, 45]. The center band owns its shared
endpoints, so every angle pair maps to exactly one class; anything outside
the bands is Other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ValidationError
from .numerics import Rng
from .types import StudyRecord, TERRITORIES, VideoRecord, territory_segments

# Representative boxes per named class (used by the synthetic generator to
# sample angles; classification itself uses the band logic above).
VIEW_SAMPLING_BOXES: Dict[str, Tuple[float, float, float, float]] = {
    "RAO_Cranial": (-45.0, -15.0, 15.0, 45.0),
    "AP_Cranial": (-15.0, 15.0, 15.0, 45.0),
    "LAO_Cranial": (15.0, 45.0, 15.0, 45.0),
    "RAO_Straight": (-45.0, -15.0, -15.0, 15.0),
    "AP": (-15.0, 15.0, -15.0, 15.0),
    "RAO_Caudal": (-45.0, -15.0, -45.0, -15.0),
    "AP_Caudal": (-15.0, 15.0, -45.0, -15.0),
    "LAO_Caudal": (15.0, 45.0, -45.0, -15.0),
    "LAO_Straight": (15.0, 45.0, -15.0, 15.0),
    "LAO_Lateral": (70.0, 110.0, -15.0, 15.0),
    "RAO_Lateral": (-110.0, -70.0, -15.0, 15.0),
}


def _primary_band(p: float) -> Optional[str]:
    if -110.0 <= p <= -70.0:
        return "lat_neg"
    if -45.0 <= p < -15.0:
        return "neg"
    if -15.0 <= p <= 15.0:
        return "mid"
    if 15.0 < p <= 45.0:
        return "pos"
    if 70.0 <= p <= 110.0:
        return "lat_pos"
    return None


def _secondary_band(s: float) -> Optional[str]:
    if -45.0 <= s < -15.0:
        return "caudal"
    if -15.0 <= s <= 15.0:
        return "straight"
    if 15.0 < s <= 45.0:
        return "cranial"
    return None


_BAND_TO_CLASS = {
    ("neg", "cranial"): "RAO_Cranial",
    ("mid", "cranial"): "AP_Cranial",
    ("pos", "cranial"): "LAO_Cranial",
    ("neg", "straight"): "RAO_Straight",
    ("mid", "straight"): "AP",
    ("pos", "straight"): "LAO_Straight",
    ("neg", "caudal"): "RAO_Caudal",
    ("mid", "caudal"): "AP_Caudal",
    ("pos", "caudal"): "LAO_Caudal",
    ("lat_pos", "straight"): "LAO_Lateral",
    ("lat_neg", "straight"): "RAO_Lateral",
}


def classify_view(primary_deg: float, secondary_deg: float) -> str:
    """Map a (primary, secondary) gantry angle pair to one of 12 view classes."""
    if not (math.isfinite(primary_deg) and math.isfinite(secondary_deg)):
        raise ValidationError("invalid angle", code="invalid_angle")
    band = (_primary_band(primary_deg), _secondary_band(secondary_deg))
    return _BAND_TO_CLASS.get(band, "Other")


def assign_phases(videos: Sequence[VideoRecord]) -> List[VideoRecord]:
    """Assign diagnostic / interventional / post_procedural per artery.

    Arteries are independent: equipment on the RCA never demotes later LCA
    videos. Once equipment has been seen in an artery, later videos of that
    artery are interventional while equipment is visible and post_procedural
    once it is gone.
    """
    times = [v.acquired_at for v in videos]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValidationError("unsorted study", code="unsorted_study")
    equipment_seen: Dict[str, bool] = {}
    out: List[VideoRecord] = []
    for v in videos:
        v.validate()
        seen = equipment_seen.get(v.artery, False)
        if v.equipment != "none":
            phase = "interventional"
            equipment_seen[v.artery] = True
        elif seen:
            phase = "post_procedural"
        else:
            phase = "diagnostic"
        view = v.view_class or classify_view(v.primary_angle_deg, v.secondary_angle_deg)
        out.append(v.with_(phase=phase, view_class=view))
    return out


def select_diagnostic(
    study: StudyRecord,
    max_n: int = 10,
    mode: str = "inference",
    seed: int = 0,
) -> Tuple[List[VideoRecord], np.ndarray]:
    """Keep diagnostic contrast LCA/RCA videos, capped at ``max_n``.

    Overflow policy: inference keeps the chronologically first ``max_n``;
    training draws a seeded uniform sample (then restores chronological
    order). Returns the kept videos plus a boolean mask of length ``max_n``
    marking real versus padded slots.
    """
    if mode not in ("inference", "training"):
        raise ValidationError(f"unknown selection mode {mode!r}")
    if any(v.phase is None for v in study.videos):
        raise ValidationError(
            f"study {study.study_id}: phases not assigned", code="phases_missing"
        )
    kept = [
        v
        for v in study.videos
        if v.phase == "diagnostic" and v.contrast and v.artery in TERRITORIES
    ]
    if not kept:
        raise ValidationError("no diagnostic content", code="no_diagnostic_content")
    if len(kept) > max_n:
        if mode == "inference":
            kept = kept[:max_n]
        else:
            rng = Rng(seed).derive("select_diagnostic", study.study_id)
            idx = sorted(rng.choice(len(kept), size=max_n, replace=False).tolist())
            kept = [kept[i] for i in idx]
    mask = np.zeros(max_n, dtype=bool)
    mask[: len(kept)] = True
    return kept, mask


@dataclass
class TerritoryPair:
    territory: str
    videos: List[VideoRecord]
    report_text: str
    segments: Tuple[str, ...]


def pair_videos_reports(study: StudyRecord) -> Tuple[TerritoryPair, TerritoryPair]:
    """Pair each territory's videos with that territory's report text and
    dominance-adjusted segment subset. Co-dominance pairs like right
    dominance (the anatomical default)."""
    pairs = []
    for territory in TERRITORIES:
        if territory not in study.report_text:
            raise ValidationError(
                f"study {study.study_id}: unpaired territory {territory}",
                code="unpaired_territory",
            )
        videos = [v for v in study.videos if v.artery == territory]
        pairs.append(
            TerritoryPair(
                territory=territory,
                videos=videos,
                report_text=study.report_text[territory],
                segments=territory_segments(territory, study.dominance),
            )
        )
    return pairs[0], pairs[1]
