"""Cohort manifest ingestion, embedding store IO, patient-level splitting,
and a synthetic cohort generator with known ground truth.

Embedding store format ("DCEM"): magic bytes ``DCEM``, unsigned 32-bit count,
unsigned 32-bit dim (must be 512), then count x dim little-endian 32-bit
floats, row-major. ``embedding_ref`` in the manifest is the row index.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .acquisition import VIEW_SAMPLING_BOXES
from .errors import ValidationError
from .numerics import Rng
from .reports import render_labels
from .types import (
    ARTERY_VALUES,
    CALCIFICATION_GRADES,
    Cohort,
    DOMINANCE_VALUES,
    EQUIPMENT_VALUES,
    SEGMENTS,
    SPLITS,
    SegmentFinding,
    SegmentLabelSet,
    StudyRecord,
    TERRITORIES,
    VideoRecord,
    stenosis_threshold,
    territory_segments,
)

EMBEDDING_DIM = 512
_DCEM_MAGIC = b"DCEM"


def write_embeddings(path: str, embeddings: np.ndarray) -> None:
    arr = np.asarray(embeddings, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[1] != EMBEDDING_DIM:
        raise ValidationError(
            f"embedding store requires shape (n, {EMBEDDING_DIM}), got {arr.shape}"
        )
    with open(path, "wb") as fh:
        fh.write(_DCEM_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def read_embeddings(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _DCEM_MAGIC:
            raise ValidationError(f"{path}: bad embedding store magic {magic!r}")
        count, dim = struct.unpack("<II", fh.read(8))
        if dim != EMBEDDING_DIM:
            raise ValidationError(f"{path}: embedding dim {dim} != {EMBEDDING_DIM}")
        data = np.frombuffer(fh.read(count * dim * 4), dtype="<f4")
    if data.size != count * dim:
        raise ValidationError(f"{path}: truncated embedding store")
    return data.reshape(count, dim).astype(np.float64)


# ---------------------------------------------------------------------------
# Manifest JSON
# ---------------------------------------------------------------------------


def _req(obj: dict, key: str, path: str):
    if key not in obj:
        raise ValidationError(f"{path}.{key}: missing required field")
    return obj[key]


def _labels_from_json(obj: dict, path: str) -> SegmentLabelSet:
    labels = SegmentLabelSet()
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}: labels must be an object")
    for seg, raw in obj.items():
        if seg not in SEGMENTS:
            raise ValidationError(f"{path}.{seg}: unknown segment")
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}.{seg}: finding must be an object")
        try:
            labels.set(
                seg,
                SegmentFinding.create(
                    stenosis_pct=raw.get("stenosis_pct"),
                    calcification=raw.get("calcification", "none"),
                    thrombus=raw.get("thrombus", False),
                    cto=raw.get("cto", False),
                ),
            )
        except ValidationError as exc:
            raise ValidationError(f"{path}.{seg}: {exc}") from exc
    return labels


def _labels_to_json(labels: SegmentLabelSet) -> dict:
    out = {}
    for seg in SEGMENTS:
        if seg not in labels.findings:
            continue
        f = labels.findings[seg]
        out[seg] = {
            "stenosis_pct": f.stenosis_pct,
            "calcification": f.calcification,
            "thrombus": f.thrombus,
            "cto": f.cto,
        }
    return out


def _video_from_json(obj: dict, path: str) -> VideoRecord:
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}: video must be an object")
    for key, typ in (
        ("video_id", str),
        ("acquired_at", (int, float)),
        ("primary_angle_deg", (int, float)),
        ("secondary_angle_deg", (int, float)),
        ("fps", (int, float)),
        ("frame_count", int),
        ("contrast", bool),
        ("equipment", str),
        ("artery", str),
    ):
        val = _req(obj, key, path)
        if not isinstance(val, typ) or (typ is int and isinstance(val, bool)):
            raise ValidationError(f"{path}.{key}: expected {typ}, got {type(val).__name__}")
    if obj["equipment"] not in EQUIPMENT_VALUES:
        raise ValidationError(f"{path}.equipment: unknown value {obj['equipment']!r}")
    if obj["artery"] not in ARTERY_VALUES:
        raise ValidationError(f"{path}.artery: unknown value {obj['artery']!r}")
    embedding_ref = obj.get("embedding_ref")
    if embedding_ref is not None and (isinstance(embedding_ref, bool) or not isinstance(embedding_ref, int)):
        raise ValidationError(f"{path}.embedding_ref: expected integer row index")
    embedding = obj.get("embedding")
    if embedding is not None:
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.shape != (EMBEDDING_DIM,):
            raise ValidationError(f"{path}.embedding: expected {EMBEDDING_DIM} floats")
        if not np.all(np.isfinite(embedding)):
            raise ValidationError(f"{path}.embedding: non-finite values")
    video = VideoRecord(
        video_id=obj["video_id"],
        acquired_at=float(obj["acquired_at"]),
        primary_angle_deg=float(obj["primary_angle_deg"]),
        secondary_angle_deg=float(obj["secondary_angle_deg"]),
        fps=float(obj["fps"]),
        frame_count=int(obj["frame_count"]),
        contrast=bool(obj["contrast"]),
        equipment=obj["equipment"],
        artery=obj["artery"],
        embedding_ref=embedding_ref,
        embedding=embedding,
    )
    try:
        video.validate()
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    return video


def study_from_json(obj: dict, path: str = "study", require_complete: bool = True) -> StudyRecord:
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}: study must be an object")
    study_id = _req(obj, "study_id", path)
    patient_id = _req(obj, "patient_id", path)
    dominance = _req(obj, "dominance", path)
    if dominance not in DOMINANCE_VALUES:
        raise ValidationError(f"{path}.dominance: unknown value {dominance!r}")
    videos_raw = _req(obj, "videos", path)
    if not isinstance(videos_raw, list) or not videos_raw:
        raise ValidationError(f"{path}.videos: expected a non-empty list")
    videos = [
        _video_from_json(v, f"{path}.videos[{i}]") for i, v in enumerate(videos_raw)
    ]
    report_text = obj.get("report_text", {})
    if not isinstance(report_text, dict) or any(k not in TERRITORIES for k in report_text):
        raise ValidationError(f"{path}.report_text: expected object keyed by LCA/RCA")
    labels = None
    if obj.get("labels") is not None:
        raw_labels = obj["labels"]
        if not isinstance(raw_labels, dict) or any(k not in TERRITORIES for k in raw_labels):
            raise ValidationError(f"{path}.labels: expected object keyed by LCA/RCA")
        labels = {
            terr: _labels_from_json(raw_labels[terr], f"{path}.labels.{terr}")
            for terr in sorted(raw_labels)
        }
        for terr, lab in labels.items():
            allowed = set(territory_segments(terr, dominance))
            bad = [s for s in lab.findings if s not in allowed]
            if bad:
                raise ValidationError(
                    f"{path}.labels.{terr}: segments {bad} not in territory under "
                    f"{dominance} dominance"
                )
    study = StudyRecord(
        study_id=study_id,
        patient_id=patient_id,
        dominance=dominance,
        videos=videos,
        report_text=dict(report_text),
        labels=labels,
    )
    try:
        study.validate(require_complete=require_complete)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}", code=exc.code) from exc
    return study


def load_manifest(path: str, embeddings_path: Optional[str] = None) -> Cohort:
    """Load and fully validate a cohort manifest, resolving embedding refs."""
    if not os.path.exists(path):
        raise ValidationError(f"manifest {path} does not exist")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"manifest {path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ValidationError("manifest: top level must be an object")
    studies_raw = _req(raw, "studies", "manifest")
    if not isinstance(studies_raw, list):
        raise ValidationError("manifest.studies: expected a list")
    studies: List[StudyRecord] = []
    seen_ids: set = set()
    for i, s in enumerate(studies_raw):
        study = study_from_json(s, f"manifest.studies[{i}]")
        if study.study_id in seen_ids:
            raise ValidationError(
                f"duplicate study {study.study_id!r}", code="duplicate_study"
            )
        seen_ids.add(study.study_id)
        studies.append(study)

    embeddings = None
    store = embeddings_path or raw.get("embeddings_file")
    if store is not None:
        if not os.path.isabs(store) and embeddings_path is None:
            store = os.path.join(os.path.dirname(os.path.abspath(path)), store)
        embeddings = read_embeddings(store)

    refs = [
        (s.study_id, v.video_id, v.embedding_ref)
        for s in studies
        for v in s.videos
        if v.embedding_ref is not None
    ]
    if refs and embeddings is None:
        raise ValidationError(
            "manifest uses embedding_ref but no embedding store was provided"
        )
    for study_id, video_id, ref in refs:
        if not (0 <= ref < len(embeddings)):
            raise ValidationError(
                f"dangling embedding_ref {ref} for video {video_id} of study {study_id}",
                code="dangling_embedding_ref",
            )

    split = raw.get("split", {})
    if not isinstance(split, dict) or any(v not in SPLITS for v in split.values()):
        raise ValidationError("manifest.split: expected patient_id -> train|val|test")
    return Cohort(studies=studies, split=dict(split), embeddings=embeddings)


def save_manifest(cohort: Cohort, path: str, embeddings_file: Optional[str] = None) -> None:
    """Write a cohort manifest; embeddings go in a separate DCEM store."""
    out: dict = {"schema_version": 1, "studies": []}
    if embeddings_file is not None:
        out["embeddings_file"] = embeddings_file
    if cohort.split:
        out["split"] = {k: cohort.split[k] for k in sorted(cohort.split)}
    for s in cohort.studies:
        study_obj = {
            "study_id": s.study_id,
            "patient_id": s.patient_id,
            "dominance": s.dominance,
            "report_text": {k: s.report_text[k] for k in sorted(s.report_text)},
            "videos": [
                {
                    "video_id": v.video_id,
                    "acquired_at": v.acquired_at,
                    "primary_angle_deg": v.primary_angle_deg,
                    "secondary_angle_deg": v.secondary_angle_deg,
                    "fps": v.fps,
                    "frame_count": v.frame_count,
                    "contrast": v.contrast,
                    "equipment": v.equipment,
                    "artery": v.artery,
                    "embedding_ref": v.embedding_ref,
                }
                for v in s.videos
            ],
        }
        if s.labels is not None:
            study_obj["labels"] = {
                terr: _labels_to_json(s.labels[terr]) for terr in sorted(s.labels)
            }
        out["studies"].append(study_obj)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Patient-level splitting
# ---------------------------------------------------------------------------


def split_by_patient(
    cohort: Cohort,
    ratios: Tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> Cohort:
    """Assign train/val/test at patient granularity.

    Counts come from the largest-remainder method over patients so realized
    fractions are within one patient of the targets; the assignment itself is
    a seeded permutation, deterministic under the seed.
    """
    if len(ratios) != len(SPLITS) or any(r <= 0 for r in ratios):
        raise ValidationError("ratios must be three positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios sum to {sum(ratios)}, expected 1")
    patients = cohort.patients()
    n = len(patients)
    if n < len(SPLITS):
        raise ValidationError("cohort too small", code="cohort_too_small")
    targets = [r * n for r in ratios]
    counts = [int(np.floor(t)) for t in targets]
    remainders = [t - c for t, c in zip(targets, counts)]
    for i in sorted(range(len(SPLITS)), key=lambda i: (-remainders[i], i))[
        : n - sum(counts)
    ]:
        counts[i] += 1
    order = Rng(seed).derive("split_by_patient").permutation(n)
    split: Dict[str, str] = {}
    cursor = 0
    for split_name, count in zip(SPLITS, counts):
        for idx in order[cursor : cursor + count]:
            split[patients[idx]] = split_name
        cursor += count
    return replace(cohort, split=split)


# ---------------------------------------------------------------------------
# Synthetic cohort with known ground truth
# ---------------------------------------------------------------------------


@dataclass
class LabelPrevalences:
    """Per-segment draw probabilities for the synthetic label generator."""

    cto: float = 0.05
    severe_stenosis: float = 0.15  # 70-99% band (significant without CTO)
    moderate_stenosis: float = 0.20  # 30-69% band
    calcification: float = 0.12  # moderate/severe grade
    thrombus: float = 0.06

    def validate(self) -> None:
        vals = (
            self.cto,
            self.severe_stenosis,
            self.moderate_stenosis,
            self.calcification,
            self.thrombus,
        )
        if any(not (0.0 < v < 1.0) for v in vals):
            raise ValidationError("invalid config: prevalences must lie in (0,1)")
        if self.cto + self.severe_stenosis + self.moderate_stenosis >= 1.0:
            raise ValidationError("invalid config: stenosis bands must sum below 1")


@dataclass
class SynthConfig:
    n_patients: int = 100
    videos_per_study_range: Tuple[int, int] = (4, 8)
    label_prevalences: LabelPrevalences = field(default_factory=LabelPrevalences)
    view_informativeness: float = 1.0  # P(segment visible | informative video)
    uninformative_rate: float = 0.0  # P(video carries no anatomy signal at all)
    uninformative_noise_multiplier: float = 2.0  # junk views are noisier, not just empty
    noise_sd: float = 0.0
    seed: int = 0
    lca_video_fraction: float = 0.65

    def validate(self) -> None:
        lo, hi = self.videos_per_study_range
        if self.n_patients < 1 or lo < 2 or hi < lo:
            raise ValidationError(
                "invalid config: need >=1 patient and >=2 videos per study",
                code="invalid_config",
            )
        if not (0.0 < self.view_informativeness <= 1.0):
            raise ValidationError("invalid config: view_informativeness in (0,1]")
        if not (0.0 <= self.uninformative_rate < 1.0):
            raise ValidationError("invalid config: uninformative_rate in [0,1)")
        if self.noise_sd < 0 or self.uninformative_noise_multiplier < 0:
            raise ValidationError("invalid config: noise scales must be >= 0")
        self.label_prevalences.validate()


# Latent features per segment: stenosis/100, significant-stenosis bit (at the
# segment-specific cut), significant calcification, thrombus, cto. Binary
# task bits appear directly so the cohort is separable by construction even
# after convex pooling rescales the continuous feature.
FEATURES_PER_SEGMENT = 5
N_LATENT_FEATURES = FEATURES_PER_SEGMENT * len(SEGMENTS)


def _latent_vector(labels: SegmentLabelSet) -> np.ndarray:
    y = np.zeros(N_LATENT_FEATURES)
    for i, seg in enumerate(SEGMENTS):
        f = labels.get(seg)
        pct = f.stenosis_pct or 0.0
        base = FEATURES_PER_SEGMENT * i
        y[base + 0] = pct / 100.0
        y[base + 1] = 1.0 if pct >= stenosis_threshold(seg) else 0.0
        y[base + 2] = 1.0 if f.calcification in ("moderate", "severe") else 0.0
        y[base + 3] = 1.0 if f.thrombus else 0.0
        y[base + 4] = 1.0 if f.cto else 0.0
    return y


def _segment_visibility_expanded(mask18: np.ndarray) -> np.ndarray:
    """Expand an 18-long segment visibility mask to the latent feature axis."""
    return np.repeat(mask18, FEATURES_PER_SEGMENT)


def _draw_labels(rng: Rng, prev: LabelPrevalences) -> SegmentLabelSet:
    labels = SegmentLabelSet()
    for seg in SEGMENTS:
        u = float(rng.uniform())
        if u < prev.cto:
            pct, cto = 100.0, True
        elif u < prev.cto + prev.severe_stenosis:
            pct, cto = float(rng.uniform(70.0, 99.0)), False
        elif u < prev.cto + prev.severe_stenosis + prev.moderate_stenosis:
            pct, cto = float(rng.uniform(30.0, 69.0)), False
        else:
            pct, cto = float(rng.uniform(0.0, 29.0)), False
        grade_u = float(rng.uniform())
        if grade_u < prev.calcification / 2:
            grade = "severe"
        elif grade_u < prev.calcification:
            grade = "moderate"
        elif grade_u < prev.calcification + 0.10:
            grade = "mild"
        else:
            grade = "none"
        labels.set(
            seg,
            SegmentFinding.create(
                stenosis_pct=pct,
                calcification=grade,
                thrombus=bool(rng.uniform() < prev.thrombus),
                cto=cto,
            ),
        )
    return labels


def synth_bases(seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Mutually orthonormal latent-feature and visibility bases in 512-d."""
    rng = Rng(seed).derive("synth_bases")
    raw = rng.normal(size=(EMBEDDING_DIM, N_LATENT_FEATURES + len(SEGMENTS)))
    q, _ = np.linalg.qr(raw)
    return q[:, :N_LATENT_FEATURES].copy(), q[:, N_LATENT_FEATURES:].copy()


def synth_cohort(config: SynthConfig) -> Cohort:
    """Generate a cohort whose embeddings are seeded linear images of the
    per-study latent label vector, masked by per-video lesion visibility,
    plus Gaussian noise. Generator internals are recorded on the cohort so
    tests can use them as an oracle."""
    config.validate()
    prev = config.label_prevalences
    basis_y, basis_m = synth_bases(config.seed)
    root = Rng(config.seed)

    studies: List[StudyRecord] = []
    rows: List[np.ndarray] = []
    latents: Dict[str, np.ndarray] = {}
    visibility: Dict[str, np.ndarray] = {}
    view_names = sorted(VIEW_SAMPLING_BOXES)
    lo, hi = config.videos_per_study_range

    for p in range(config.n_patients):
        srng = root.derive("study", p)
        patient_id = f"P{p:05d}"
        study_id = f"S{p:05d}"
        u = float(srng.uniform())
        dominance = "right" if u < 0.85 else ("left" if u < 0.95 else "co")
        labels = _draw_labels(srng.derive("labels"), prev)
        y = _latent_vector(labels)
        latents[study_id] = y

        n_videos = int(srng.integers(lo, hi + 1))
        vrng = srng.derive("videos")
        videos: List[VideoRecord] = []
        territory_masks = {
            terr: np.array(
                [s in set(territory_segments(terr, dominance)) for s in SEGMENTS]
            )
            for terr in TERRITORIES
        }
        for k in range(n_videos):
            if k == 0:
                artery = "LCA"
            elif k == 1:
                artery = "RCA"
            else:
                artery = "LCA" if vrng.uniform() < config.lca_video_fraction else "RCA"
            view = view_names[int(vrng.integers(0, len(view_names)))]
            p_lo, p_hi, s_lo, s_hi = VIEW_SAMPLING_BOXES[view]
            primary = float(vrng.uniform(p_lo, p_hi))
            secondary = float(vrng.uniform(s_lo, s_hi))
            informative = bool(vrng.uniform() >= config.uninformative_rate)
            m = np.zeros(len(SEGMENTS))
            if informative:
                visible = vrng.uniform(size=len(SEGMENTS)) < config.view_informativeness
                m = (visible & territory_masks[artery]).astype(np.float64)
            video_id = f"{study_id}V{k:02d}"
            visibility[video_id] = m
            emb = basis_y @ (_segment_visibility_expanded(m) * y) + basis_m @ m
            sd = config.noise_sd * (
                1.0 if informative else config.uninformative_noise_multiplier
            )
            if sd > 0:
                emb = emb + sd * vrng.normal(size=EMBEDDING_DIM)
            rows.append(emb)
            videos.append(
                VideoRecord(
                    video_id=video_id,
                    acquired_at=float(k) * 30.0,
                    primary_angle_deg=primary,
                    secondary_angle_deg=secondary,
                    fps=15.0,
                    frame_count=int(vrng.integers(40, 90)),
                    contrast=True,
                    equipment="none",
                    artery=artery,
                    embedding_ref=len(rows) - 1,
                )
            )

        report_text = {}
        territory_labels = {}
        for terr in TERRITORIES:
            segs = territory_segments(terr, dominance)
            restricted = labels.restrict(segs)
            report_text[terr] = render_labels(restricted, segments=segs)
            territory_labels[terr] = restricted
        study = StudyRecord(
            study_id=study_id,
            patient_id=patient_id,
            dominance=dominance,
            videos=videos,
            report_text=report_text,
            labels=territory_labels,
        )
        study.validate()
        studies.append(study)

    return Cohort(
        studies=studies,
        embeddings=np.vstack(rows),
        dim=EMBEDDING_DIM,
        generator={
            "config": config,
            "latent_basis": basis_y,
            "visibility_basis": basis_m,
            "latents": latents,
            "visibility": visibility,
        },
    )
