"""Video-text alignment: the three contrastive objectives with analytic
gradients, trainable linear projection heads over raw embeddings, a seeded
training loop, and retrieval/alignment evaluation.

Losses over a batch of B L2-normalized projected rows (S = similarity
matrix, diagonal = true pairs):

  * clip     symmetric cross-entropy: average of row-wise and column-wise
             CE on the diagonal targets of S / temperature;
  * infonce  one-directional (video -> text) CE on the same logits;
  * siglip   mean over all B^2 pairs of softplus(-z_ij (t s_ij + b)) with
             z = +1 on the diagonal, -1 off it; t and b are learnable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .acquisition import assign_phases, pair_videos_reports
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import hashed_text_embedding
from .errors import ValidationError
from .numerics import Rng, require_finite
from .optim import AdamW, OptimizerConfig
from .types import Cohort

LOSS_KINDS = ("clip", "siglip", "infonce")
DEFAULT_TEMPERATURE_RANGE = (0.06, 0.11)
RECALL_KS = (1, 5, 10, 25, 50)


@dataclass
class ContrastiveConfig:
    loss_kind: str = "clip"
    temperature: float = 0.07
    learning_rate: float = 3e-3
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    output_dim: int = 512
    allow_any_temperature: bool = False

    def validate(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise ValidationError(f"unknown loss kind {self.loss_kind!r}")
        if self.temperature <= 0:
            raise ValidationError("temperature must be > 0")
        lo, hi = DEFAULT_TEMPERATURE_RANGE
        if not self.allow_any_temperature and not (lo <= self.temperature <= hi):
            raise ValidationError(
                f"temperature {self.temperature} outside default range [{lo}, {hi}]; "
                "set allow_any_temperature=True to override"
            )
        if self.loss_kind in ("clip", "infonce") and self.batch_size < 2:
            raise ValidationError(f"{self.loss_kind} needs batch_size >= 2")
        if self.epochs < 1 or self.learning_rate <= 0:
            raise ValidationError("epochs >= 1 and learning_rate > 0 required")


def _check_normalized(x: np.ndarray, name: str) -> np.ndarray:
    x = require_finite(x, name)
    if x.ndim != 2:
        raise ValidationError(f"{name} must be 2-d")
    if np.max(np.abs(np.linalg.norm(x, axis=1) - 1.0)) > 1e-6:
        raise ValidationError("unnormalized input", code="unnormalized_input")
    return x


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def contrastive_loss(
    kind: str,
    video_embs: np.ndarray,
    text_embs: np.ndarray,
    temperature: float = 0.07,
    siglip_scale: float = 1.0,
    siglip_bias: float = 0.0,
):
    """Loss and analytic gradients w.r.t. the normalized embeddings (and the
    siglip scale/bias). Returns (loss, d_video, d_text, d_params)."""
    if kind not in LOSS_KINDS:
        raise ValidationError(f"unknown loss kind {kind!r}")
    if temperature <= 0:
        raise ValidationError("temperature must be > 0")
    v = _check_normalized(video_embs, "video embeddings")
    t = _check_normalized(text_embs, "text embeddings")
    if v.shape != t.shape:
        raise ValidationError("video/text batch shape mismatch")
    b = v.shape[0]
    if b < 1:
        raise ValidationError("empty batch")
    sims = v @ t.T
    d_params: Dict[str, float] = {}

    if kind in ("clip", "infonce"):
        logits = sims / temperature
        p_row = _softmax_rows(logits)
        diag = np.arange(b)
        row_ce = -np.log(p_row[diag, diag] + 1e-300).mean()
        if kind == "clip":
            p_col = _softmax_rows(logits.T).T  # softmax over axis 0
            col_ce = -np.log(p_col[diag, diag] + 1e-300).mean()
            loss = 0.5 * (row_ce + col_ce)
            d_logits = 0.5 * ((p_row - np.eye(b)) + (p_col - np.eye(b))) / b
        else:
            loss = row_ce
            d_logits = (p_row - np.eye(b)) / b
        d_sims = d_logits / temperature
    else:  # siglip
        z = 2.0 * np.eye(b) - 1.0
        logits = siglip_scale * sims + siglip_bias
        loss = float(_softplus(-z * logits).mean())
        sig = 1.0 / (1.0 + np.exp(z * logits))  # sigmoid(-z * logits)
        d_logits = -z * sig / (b * b)
        d_sims = siglip_scale * d_logits
        d_params["siglip_scale"] = float((d_logits * sims).sum())
        d_params["siglip_bias"] = float(d_logits.sum())

    d_video = d_sims @ t
    d_text = d_sims.T @ v
    return float(loss), d_video, d_text, d_params


# ---------------------------------------------------------------------------
# Projection training
# ---------------------------------------------------------------------------


@dataclass
class ProjectionPair:
    w_video: np.ndarray  # (video_input_dim, output_dim)
    b_video: np.ndarray
    w_text: np.ndarray
    b_text: np.ndarray
    siglip_scale: float = 1.0
    siglip_bias: float = 0.0

    @staticmethod
    def init(video_dim: int, text_dim: int, output_dim: int, seed: int) -> "ProjectionPair":
        rng = Rng(seed).derive("projection_init")
        return ProjectionPair(
            w_video=rng.normal(size=(video_dim, output_dim)) / np.sqrt(video_dim),
            b_video=np.zeros(output_dim),
            w_text=rng.normal(size=(text_dim, output_dim)) / np.sqrt(text_dim),
            b_text=np.zeros(output_dim),
        )

    def params(self) -> Dict[str, np.ndarray]:
        return {
            "w_video": self.w_video,
            "b_video": self.b_video,
            "w_text": self.w_text,
            "b_text": self.b_text,
            "siglip": np.array([self.siglip_scale, self.siglip_bias]),
        }

    def save(self, path: str, metadata: Optional[dict] = None) -> None:
        meta = {"kind": "contrastive_projection"}
        meta.update(metadata or {})
        save_checkpoint(path, meta, self.params())

    @staticmethod
    def load(path: str) -> Tuple["ProjectionPair", dict]:
        meta, tensors = load_checkpoint(path)
        pair = ProjectionPair(
            w_video=tensors["w_video"],
            b_video=tensors["b_video"],
            w_text=tensors["w_text"],
            b_text=tensors["b_text"],
            siglip_scale=float(tensors["siglip"][0]),
            siglip_bias=float(tensors["siglip"][1]),
        )
        return pair, meta


def project_rows(x: np.ndarray, w: np.ndarray, bias: np.ndarray):
    """Affine map + row L2 normalization; returns (normalized, cache)."""
    u = x @ w + bias
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValidationError("zero vector", code="zero_vector")
    z = u / norms
    return z, (x, z, norms)


def project_rows_backward(d_z: np.ndarray, cache):
    """Gradient through normalization and the affine map."""
    x, z, norms = cache
    d_u = (d_z - z * (z * d_z).sum(axis=1, keepdims=True)) / norms
    return x.T @ d_u, d_u.sum(axis=0)


@dataclass
class ContrastivePairSet:
    """One row per (study, territory): mean diagnostic video embedding plus
    the territory report's text embedding."""

    video_inputs: np.ndarray  # (n_pairs, video_dim)
    text_inputs: np.ndarray  # (n_pairs, text_dim)
    study_ids: List[str]
    territories: List[str]
    texts: List[str] = field(default_factory=list)

    def __len__(self):
        return self.video_inputs.shape[0]


def build_pairs(
    cohort: Cohort, text_dim: int = 512, text_seed: int = 0
) -> ContrastivePairSet:
    """Territory-level pairs: mean of diagnostic contrast video embeddings
    per territory, against the hashed embedding of that territory's report.
    Territories with no usable diagnostic video are skipped with a warning."""
    videos_rows: List[np.ndarray] = []
    text_rows: List[np.ndarray] = []
    study_ids: List[str] = []
    territories: List[str] = []
    texts: List[str] = []
    skipped = 0
    for study in cohort.studies:
        staged = study
        if any(v.phase is None for v in study.videos):
            staged_videos = assign_phases(study.videos)
            staged = StudyView(study, staged_videos)
        for pair in pair_videos_reports(staged):
            usable = [
                v
                for v in pair.videos
                if v.phase == "diagnostic" and v.contrast and v.artery == pair.territory
            ]
            if not usable:
                skipped += 1
                continue
            emb = np.mean([cohort.embedding_for(v) for v in usable], axis=0)
            videos_rows.append(emb)
            text_rows.append(hashed_text_embedding(pair.report_text, text_dim, text_seed))
            study_ids.append(study.study_id)
            territories.append(pair.territory)
            texts.append(pair.report_text)
    if skipped:
        warnings.warn(f"skipped {skipped} territories with no diagnostic video")
    if not videos_rows:
        raise ValidationError("no usable video-report pairs", code="no_pairs")
    return ContrastivePairSet(
        video_inputs=np.vstack(videos_rows),
        text_inputs=np.vstack(text_rows),
        study_ids=study_ids,
        territories=territories,
        texts=texts,
    )


class StudyView:
    """Study with phase-assigned videos, leaving the original untouched."""

    def __init__(self, study, videos):
        self.study_id = study.study_id
        self.patient_id = study.patient_id
        self.dominance = study.dominance
        self.report_text = study.report_text
        self.labels = study.labels
        self.videos = videos


def _batch_loss_and_grads(pair: ProjectionPair, config: ContrastiveConfig, xv, xt):
    zv, cache_v = project_rows(xv, pair.w_video, pair.b_video)
    zt, cache_t = project_rows(xt, pair.w_text, pair.b_text)
    loss, d_zv, d_zt, d_params = contrastive_loss(
        config.loss_kind,
        zv,
        zt,
        temperature=config.temperature,
        siglip_scale=pair.siglip_scale,
        siglip_bias=pair.siglip_bias,
    )
    d_wv, d_bv = project_rows_backward(d_zv, cache_v)
    d_wt, d_bt = project_rows_backward(d_zt, cache_t)
    grads = {
        "w_video": d_wv,
        "b_video": d_bv,
        "w_text": d_wt,
        "b_text": d_bt,
        "siglip": np.array(
            [d_params.get("siglip_scale", 0.0), d_params.get("siglip_bias", 0.0)]
        ),
    }
    return loss, grads


def train_contrastive(
    pairs: ContrastivePairSet,
    config: ContrastiveConfig,
    opt_config: Optional[OptimizerConfig] = None,
) -> Tuple[ProjectionPair, List[Tuple[int, float]]]:
    """Seeded decoupled-weight-decay training of the projection pair.

    Returns the trained pair and the per-epoch loss history. If the loss goes
    non-finite, training aborts and the last finite state is returned.
    """
    config.validate()
    if opt_config is None:
        opt_config = OptimizerConfig(
            learning_rate=config.learning_rate,
            weight_decay=config.weight_decay,
            epochs=config.epochs,
            schedule="constant",
        )
    n = len(pairs)
    if n < 1:
        raise ValidationError("no pairs to train on")
    pair = ProjectionPair.init(
        pairs.video_inputs.shape[1], pairs.text_inputs.shape[1], config.output_dim, config.seed
    )
    params = pair.params()
    optimizer = AdamW(params, opt_config)
    rng = Rng(config.seed).derive("train_contrastive")
    history: List[Tuple[int, float]] = []
    batch = min(config.batch_size, n)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            if idx.size < 2 and config.loss_kind in ("clip", "infonce") and n >= 2:
                continue  # drop a trailing singleton batch: CE over one pair is vacuous
            snapshot = {k: v.copy() for k, v in params.items()}
            loss, grads = _batch_loss_and_grads(
                pair, config, pairs.video_inputs[idx], pairs.text_inputs[idx]
            )
            if not np.isfinite(loss):
                for k in params:
                    params[k][...] = snapshot[k]
                _sync_pair(pair, params)
                warnings.warn("non-finite loss; aborting with last finite state")
                return pair, history
            optimizer.step(params, grads)
            _sync_pair(pair, params)
            total += loss * idx.size
        history.append((epoch, total / n))
    return pair, history


def _sync_pair(pair: ProjectionPair, params: Dict[str, np.ndarray]) -> None:
    pair.w_video = params["w_video"]
    pair.b_video = params["b_video"]
    pair.w_text = params["w_text"]
    pair.b_text = params["b_text"]
    pair.siglip_scale = float(params["siglip"][0])
    pair.siglip_bias = float(params["siglip"][1])


def project_pairs(pair: ProjectionPair, pairs: ContrastivePairSet):
    zv, _ = project_rows(pairs.video_inputs, pair.w_video, pair.b_video)
    zt, _ = project_rows(pairs.text_inputs, pair.w_text, pair.b_text)
    return zv, zt


# ---------------------------------------------------------------------------
# Retrieval evaluation
# ---------------------------------------------------------------------------


@dataclass
class DirectionMetrics:
    recall: Dict[int, float]
    mean_rank: float
    median_rank: float
    n_queries: int
    n_candidates: int


@dataclass
class RetrievalMetrics:
    v2t: DirectionMetrics
    t2v: DirectionMetrics
    alignment: float
    study_v2t: Optional[DirectionMetrics] = None
    study_t2v: Optional[DirectionMetrics] = None


def _direction_metrics(ranks: np.ndarray, n_candidates: int, ks) -> DirectionMetrics:
    if ranks.size == 0:
        raise ValidationError("empty candidate set")
    recall = {}
    prev = 0.0
    for k in ks:
        r = float((ranks <= k).mean())
        if r < prev - 1e-12:
            raise AssertionError("recall must be monotone in K")
        recall[k] = r
        prev = r
    return DirectionMetrics(
        recall=recall,
        mean_rank=float(ranks.mean()),
        median_rank=float(np.median(ranks)),
        n_queries=int(ranks.size),
        n_candidates=int(n_candidates),
    )


def _worst_case_ranks(scores: np.ndarray, true_cols: np.ndarray) -> np.ndarray:
    """Competition rank of the true candidate per row; tied candidates share
    the bottom rank of their tie block (worst-case convention)."""
    true_scores = scores[np.arange(scores.shape[0]), true_cols]
    better = (scores > true_scores[:, None]).sum(axis=1)
    equal = (scores == true_scores[:, None]).sum(axis=1)  # includes the true one
    return better + equal


def _group_min(values: np.ndarray, groups: Sequence[str]) -> np.ndarray:
    best: Dict[str, float] = {}
    for v, g in zip(values, groups):
        if g not in best or v < best[g]:
            best[g] = v
    return np.array([best[g] for g in sorted(best)], dtype=np.float64)


def retrieval_eval(
    video_embs: np.ndarray,
    text_embs: np.ndarray,
    pairing: Sequence[int],
    ks: Sequence[int] = RECALL_KS,
    study_ids: Optional[Sequence[str]] = None,
    dedupe_texts: bool = False,
) -> RetrievalMetrics:
    """Cross-modal retrieval metrics in both directions.

    ``pairing[i]`` is the true text row for video row i (texts may repeat).
    ``dedupe_texts=True`` collapses identical text rows into one candidate.
    """
    v = require_finite(video_embs, "video embeddings")
    t = require_finite(text_embs, "text embeddings")
    pairing = np.asarray(pairing, dtype=int)
    if v.ndim != 2 or t.ndim != 2 or v.shape[1] != t.shape[1]:
        raise ValidationError("embedding shape mismatch")
    if pairing.shape != (v.shape[0],):
        raise ValidationError("pairing must map each video to one text")
    if t.shape[0] == 0 or v.shape[0] == 0:
        raise ValidationError("empty candidate set")
    if pairing.min() < 0 or pairing.max() >= t.shape[0]:
        raise ValidationError("pairing index out of range")

    vn = v / np.linalg.norm(v, axis=1, keepdims=True)
    tn = t / np.linalg.norm(t, axis=1, keepdims=True)
    alignment = float(
        np.mean([vn[i] @ tn[pairing[i]] for i in range(v.shape[0])])
    )

    if dedupe_texts:
        uniq, inverse = np.unique(tn.round(12), axis=0, return_inverse=True)
        tn_candidates = uniq
        true_cols = inverse[pairing]
    else:
        tn_candidates = tn
        true_cols = pairing

    sims_v2t = vn @ tn_candidates.T
    ranks_v2t = _worst_case_ranks(sims_v2t, true_cols)

    # text -> video: one query per pair; candidates are all videos
    sims_t2v = tn[pairing] @ vn.T
    ranks_t2v = _worst_case_ranks(sims_t2v, np.arange(v.shape[0]))

    study_v2t = study_t2v = None
    if study_ids is not None:
        if len(study_ids) != v.shape[0]:
            raise ValidationError("study_ids length mismatch")
        study_v2t = _direction_metrics(
            _group_min(ranks_v2t, study_ids), tn_candidates.shape[0], ks
        )
        study_t2v = _direction_metrics(
            _group_min(ranks_t2v, study_ids), v.shape[0], ks
        )

    return RetrievalMetrics(
        v2t=_direction_metrics(ranks_v2t, tn_candidates.shape[0], ks),
        t2v=_direction_metrics(ranks_t2v, v.shape[0], ks),
        alignment=alignment,
        study_v2t=study_v2t,
        study_t2v=study_t2v,
    )


def alignment_score(
    video_embs: np.ndarray, text_embs: np.ndarray, pairing: Sequence[int]
) -> float:
    """Mean cosine similarity over true pairs."""
    v = require_finite(video_embs, "video embeddings")
    t = require_finite(text_embs, "text embeddings")
    pairing = np.asarray(pairing, dtype=int)
    if pairing.size == 0:
        raise ValidationError("zero pairs")
    vn = v / np.linalg.norm(v, axis=1, keepdims=True)
    tn = t / np.linalg.norm(t, axis=1, keepdims=True)
    return float(np.mean([vn[i] @ tn[pairing[i]] for i in range(pairing.size)]))
