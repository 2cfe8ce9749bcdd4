"""Multi-instance pooling over up to 10 video embeddings, multi-task linear
heads over 18 segments x 4 tasks + stenosis regression, weighted multi-task
loss with analytic gradients, a seeded training loop, and the
single-vs-average-vs-attention ablation harness.

Pooling modes (all permutation-invariant across videos; padding is masked
attention, never literal zero rows entering a softmax):

  * attention_cls        one masked multi-head cross-attention block with a
                         learned CLS query over key/value projections;
  * gated_attention      tanh/sigmoid gated scoring, softmax-weighted sum of
                         the raw video embeddings;
  * mean / max           masked arithmetic mean / coordinate-wise max;
  * hybrid_attention_cls concat(gated_attention, attention_cls) -> 2d;
  * hybrid_mean_cls      concat(mean, attention_cls) -> 2d;
  * two_stage_cls        within-video CLS attention over token matrices,
                         then across-video CLS attention; without token
                         inputs it degrades to attention_cls with a warning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .acquisition import assign_phases, select_diagnostic
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ValidationError
from .numerics import Rng, require_finite
from .optim import AdamW, OptimizerConfig, lr_at_epoch
from .types import Cohort, SEGMENTS, StudyRecord, VIEW_CLASSES, derive_binary_labels

POOLING_MODES = (
    "attention_cls",
    "gated_attention",
    "mean",
    "max",
    "hybrid_attention_cls",
    "hybrid_mean_cls",
    "two_stage_cls",
)
BINARY_TASKS = ("stenosis", "calcification", "thrombus", "cto")
_TASK_TO_LABEL = {
    "stenosis": "stenosis_significant",
    "calcification": "calcif_significant",
    "thrombus": "thrombus",
    "cto": "cto",
}


@dataclass
class PoolingConfig:
    mode: str = "attention_cls"
    num_heads: int = 4
    hidden_dim: int = 64
    dropout: float = 0.0
    max_videos: int = 10
    seed: int = 0
    embed_dim: int = 512
    use_view_embedding: bool = False

    def validate(self) -> None:
        if self.mode not in POOLING_MODES:
            raise ValidationError(f"unknown pooling mode {self.mode!r}")
        if self.hidden_dim % self.num_heads or self.embed_dim % self.num_heads:
            raise ValidationError("num_heads must divide hidden_dim and embed_dim")
        if not (0.0 <= self.dropout < 1.0):
            raise ValidationError("dropout must lie in [0, 1)")
        if self.max_videos < 1 or self.embed_dim < 1:
            raise ValidationError("max_videos and embed_dim must be >= 1")

    @property
    def pooled_dim(self) -> int:
        return 2 * self.embed_dim if self.mode.startswith("hybrid") else self.embed_dim


@dataclass
class HeadConfig:
    n_segments: int = len(SEGMENTS)
    stenosis_weight: float = 2.0
    huber_delta: float = 1.0  # on percent/100 residuals
    dropout: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.n_segments != len(SEGMENTS):
            raise ValidationError(f"heads must cover all {len(SEGMENTS)} segments")
        if self.stenosis_weight <= 0 or self.huber_delta <= 0:
            raise ValidationError("loss weights and huber delta must be > 0")
        if not (0.0 <= self.dropout < 1.0):
            raise ValidationError("dropout must lie in [0, 1)")


@dataclass
class PooledStudyState:
    embedding: np.ndarray
    weights: np.ndarray  # per input video; padded slots exactly 0
    mask: np.ndarray


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------


def _init_cls_block(rng: Rng, prefix: str, d: int, h: int, num_heads: int):
    dk = h // num_heads
    return {
        f"{prefix}cls": rng.normal(size=(num_heads, dk)) / np.sqrt(dk),
        f"{prefix}wk": rng.normal(size=(d, h)) / np.sqrt(d),
        f"{prefix}wv": rng.normal(size=(d, d)) / np.sqrt(d),
    }


def init_pooling_params(config: PoolingConfig) -> Dict[str, np.ndarray]:
    config.validate()
    rng = Rng(config.seed).derive("pooling_init", config.mode)
    d, h = config.embed_dim, config.hidden_dim
    params: Dict[str, np.ndarray] = {}
    if config.mode in ("attention_cls", "hybrid_attention_cls", "hybrid_mean_cls"):
        params.update(_init_cls_block(rng.derive("cls"), "", d, h, config.num_heads))
    if config.mode in ("gated_attention", "hybrid_attention_cls"):
        params.update(
            {
                "gate_v": rng.derive("gate").normal(size=(h, d)) / np.sqrt(d),
                "gate_u": rng.derive("gate2").normal(size=(h, d)) / np.sqrt(d),
                "gate_w": rng.derive("gate3").normal(size=(h,)) / np.sqrt(h),
            }
        )
    if config.mode == "two_stage_cls":
        params.update(
            _init_cls_block(rng.derive("within"), "within_", d, h, config.num_heads)
        )
        params.update(
            _init_cls_block(rng.derive("across"), "across_", d, h, config.num_heads)
        )
    if config.use_view_embedding:
        params["view_table"] = rng.derive("views").normal(
            size=(len(VIEW_CLASSES), d)
        ) * 0.01
    return params


def init_head_params(pooled_dim: int, config: HeadConfig) -> Dict[str, np.ndarray]:
    """Zero-initialized linear probes (no spurious random directions)."""
    config.validate()
    params: Dict[str, np.ndarray] = {}
    for task in ("regression",) + BINARY_TASKS:
        params[f"head_{task}_w"] = np.zeros((config.n_segments, pooled_dim))
        params[f"head_{task}_b"] = np.zeros(config.n_segments)
    return params


# ---------------------------------------------------------------------------
# Masked softmax helpers (batch, axis=1)
# ---------------------------------------------------------------------------


def _masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over axis 1 with exact zeros at masked slots.

    ``scores`` is (B, N) or (B, N, H); ``mask`` is (B, N) bool with at least
    one True per row.
    """
    m = mask if scores.ndim == 2 else mask[:, :, None]
    neg = np.where(m, scores, -np.inf)
    shifted = neg - neg.max(axis=1, keepdims=True)
    e = np.where(m, np.exp(shifted), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def _masked_softmax_backward(a: np.ndarray, da: np.ndarray, mask: np.ndarray) -> np.ndarray:
    inner = (a * da).sum(axis=1, keepdims=True)
    ds = a * (da - inner)
    m = mask if a.ndim == 2 else mask[:, :, None]
    return np.where(m, ds, 0.0)


# ---------------------------------------------------------------------------
# Pooling forward/backward
# ---------------------------------------------------------------------------


def _cls_attention_forward(e, mask, params, prefix, num_heads):
    b, n, d = e.shape
    cls = params[f"{prefix}cls"]
    wk = params[f"{prefix}wk"]
    wv = params[f"{prefix}wv"]
    dk = cls.shape[1]
    k = (e @ wk).reshape(b, n, num_heads, dk)
    scores = np.einsum("bnhk,hk->bnh", k, cls) / np.sqrt(dk)
    a = _masked_softmax(scores, mask)
    v = (e @ wv).reshape(b, n, num_heads, d // num_heads)
    pooled = np.einsum("bnh,bnhe->bhe", a, v).reshape(b, d)
    cache = (e, mask, k, a, v, cls, wk, wv)
    return pooled, a.mean(axis=2), cache


def _cls_attention_backward(d_pooled, cache, prefix, grads):
    e, mask, k, a, v, cls, wk, wv = cache
    b, n, d = e.shape
    num_heads, dk = cls.shape
    g = d_pooled.reshape(b, num_heads, d // num_heads)
    dv = np.einsum("bnh,bhe->bnhe", a, g)
    da = np.einsum("bnhe,bhe->bnh", v, g)
    ds = _masked_softmax_backward(a, da, mask)
    grads[f"{prefix}cls"] = grads.get(f"{prefix}cls", 0.0) + np.einsum(
        "bnh,bnhk->hk", ds, k
    ) / np.sqrt(dk)
    dkmat = np.einsum("bnh,hk->bnhk", ds, cls) / np.sqrt(dk)
    grads[f"{prefix}wk"] = grads.get(f"{prefix}wk", 0.0) + np.einsum(
        "bnd,bnj->dj", e, dkmat.reshape(b, n, -1)
    )
    grads[f"{prefix}wv"] = grads.get(f"{prefix}wv", 0.0) + np.einsum(
        "bnd,bnj->dj", e, dv.reshape(b, n, -1)
    )
    de = dkmat.reshape(b, n, -1) @ wk.T + dv.reshape(b, n, -1) @ wv.T
    return de


def _gated_forward(e, mask, params):
    t = np.tanh(e @ params["gate_v"].T)
    u = 1.0 / (1.0 + np.exp(-(e @ params["gate_u"].T)))
    scores = (t * u) @ params["gate_w"]
    a = _masked_softmax(scores, mask)
    pooled = np.einsum("bn,bnd->bd", a, e)
    return pooled, a, (e, mask, t, u, a, params["gate_v"], params["gate_u"], params["gate_w"])


def _gated_backward(d_pooled, cache, grads):
    e, mask, t, u, a, gv, gu, gw = cache
    de = a[:, :, None] * d_pooled[:, None, :]
    da = np.einsum("bnd,bd->bn", e, d_pooled)
    ds = _masked_softmax_backward(a, da, mask)
    grads["gate_w"] = grads.get("gate_w", 0.0) + np.einsum("bn,bnh->h", ds, t * u)
    dtu = ds[:, :, None] * gw[None, None, :]
    dpre_v = dtu * u * (1.0 - t * t)
    dpre_u = dtu * t * u * (1.0 - u)
    grads["gate_v"] = grads.get("gate_v", 0.0) + np.einsum("bnh,bnd->hd", dpre_v, e)
    grads["gate_u"] = grads.get("gate_u", 0.0) + np.einsum("bnh,bnd->hd", dpre_u, e)
    de = de + dpre_v @ gv + dpre_u @ gu
    return de


def _mean_forward(e, mask):
    counts = mask.sum(axis=1, keepdims=True).astype(np.float64)
    pooled = (e * mask[:, :, None]).sum(axis=1) / counts
    weights = mask / counts
    return pooled, weights, (mask, counts)


def _mean_backward(d_pooled, cache):
    mask, counts = cache
    return mask[:, :, None] * d_pooled[:, None, :] / counts[:, :, None]


def _max_forward(e, mask):
    neg = np.where(mask[:, :, None], e, -np.inf)
    argmax = neg.argmax(axis=1)  # (B, d)
    pooled = np.take_along_axis(e, argmax[:, None, :], axis=1)[:, 0, :]
    counts = mask.sum(axis=1, keepdims=True).astype(np.float64)
    weights = mask / counts  # max has no natural weight distribution; report uniform
    return pooled, weights, (e.shape, argmax)


def _max_backward(d_pooled, cache):
    shape, argmax = cache
    de = np.zeros(shape)
    np.put_along_axis(de, argmax[:, None, :], d_pooled[:, None, :], axis=1)
    return de


def pool_batch(
    e: np.ndarray,
    mask: np.ndarray,
    config: PoolingConfig,
    params: Dict[str, np.ndarray],
    tokens: Optional[np.ndarray] = None,
    token_mask: Optional[np.ndarray] = None,
    view_ids: Optional[np.ndarray] = None,
):
    """Batched pooling forward pass.

    ``e`` is (B, N, d) with padded rows arbitrary, ``mask`` (B, N) marking
    real slots. Returns (pooled (B, D), weights (B, N), cache).
    """
    config.validate()
    e = require_finite(e, "video embeddings")
    if e.ndim != 3:
        raise ValidationError("expected (batch, videos, dim) embeddings")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != e.shape[:2]:
        raise ValidationError("mask shape mismatch")
    if not mask.any(axis=1).all():
        raise ValidationError("empty study", code="empty_study")
    if e.shape[1] > config.max_videos:
        raise ValidationError(f"more than max_videos={config.max_videos} slots")
    mode = config.mode
    cache: Dict[str, object] = {"mode": mode, "mask": mask}

    if config.use_view_embedding:
        if view_ids is None:
            raise ValidationError("use_view_embedding requires view_ids")
        view_ids = np.asarray(view_ids, dtype=int)
        e = e + params["view_table"][view_ids] * mask[:, :, None]
        cache["view_ids"] = view_ids

    if mode == "two_stage_cls" and tokens is None:
        warnings.warn(
            "two_stage_cls without per-video token matrices; using attention_cls",
            stacklevel=2,
        )
        mode = "attention_cls"
        cache["mode"] = "attention_cls_degraded"

    if mode == "attention_cls" or cache.get("mode") == "attention_cls_degraded":
        prefix = "" if "cls" in params else "across_"  # degraded two-stage reuses across block
        pooled, weights, c = _cls_attention_forward(e, mask, params, prefix, config.num_heads)
        cache.update(att=c, prefix=prefix)
    elif mode == "gated_attention":
        pooled, weights, c = _gated_forward(e, mask, params)
        cache.update(gated=c)
    elif mode == "mean":
        pooled, weights, c = _mean_forward(e, mask)
        cache.update(mean=c)
    elif mode == "max":
        pooled, weights, c = _max_forward(e, mask)
        cache.update(max=c)
    elif mode == "hybrid_attention_cls":
        p1, _, c1 = _gated_forward(e, mask, params)
        p2, weights, c2 = _cls_attention_forward(e, mask, params, "", config.num_heads)
        pooled = np.concatenate([p1, p2], axis=1)
        cache.update(gated=c1, att=c2, prefix="")
    elif mode == "hybrid_mean_cls":
        p1, _, c1 = _mean_forward(e, mask)
        p2, weights, c2 = _cls_attention_forward(e, mask, params, "", config.num_heads)
        pooled = np.concatenate([p1, p2], axis=1)
        cache.update(mean=c1, att=c2, prefix="")
    elif mode == "two_stage_cls":
        tokens = require_finite(tokens, "tokens")
        if token_mask is None:
            token_mask = np.ones(tokens.shape[:3], dtype=bool)
        token_mask = np.asarray(token_mask, dtype=bool)
        b, n, t, d = tokens.shape
        flat_idx = np.flatnonzero(mask.reshape(-1))
        flat_tokens = tokens.reshape(b * n, t, d)[flat_idx]
        flat_tmask = token_mask.reshape(b * n, t)[flat_idx]
        if not flat_tmask.any(axis=1).all():
            raise ValidationError("empty study", code="empty_study")
        hvid_flat, _, c_within = _cls_attention_forward(
            flat_tokens, flat_tmask, params, "within_", config.num_heads
        )
        hvid = np.zeros((b * n, d))
        hvid[flat_idx] = hvid_flat
        hvid = hvid.reshape(b, n, d)
        pooled, weights, c_across = _cls_attention_forward(
            hvid, mask, params, "across_", config.num_heads
        )
        cache.update(
            att=c_across, prefix="across_", within=c_within, flat_idx=flat_idx,
            token_shape=tokens.shape,
        )
    else:  # pragma: no cover
        raise ValidationError(f"unknown pooling mode {mode!r}")

    weights = weights * mask  # padded slots carry exactly 0
    return pooled, weights, cache


def pool_batch_backward(
    d_pooled: np.ndarray,
    cache: Dict[str, object],
    config: PoolingConfig,
    grads: Dict[str, np.ndarray],
):
    """Accumulates parameter gradients into ``grads``; returns d_embeddings
    (and d_tokens for two-stage pooling)."""
    mode = cache["mode"]
    mask = cache["mask"]
    d = config.embed_dim
    d_tokens = None
    if mode in ("attention_cls", "attention_cls_degraded"):
        de = _cls_attention_backward(d_pooled, cache["att"], cache["prefix"], grads)
    elif mode == "gated_attention":
        de = _gated_backward(d_pooled, cache["gated"], grads)
    elif mode == "mean":
        de = _mean_backward(d_pooled, cache["mean"])
    elif mode == "max":
        de = _max_backward(d_pooled, cache["max"])
    elif mode == "hybrid_attention_cls":
        de = _gated_backward(d_pooled[:, :d], cache["gated"], grads)
        de = de + _cls_attention_backward(d_pooled[:, d:], cache["att"], "", grads)
    elif mode == "hybrid_mean_cls":
        de = _mean_backward(d_pooled[:, :d], cache["mean"])
        de = de + _cls_attention_backward(d_pooled[:, d:], cache["att"], "", grads)
    elif mode == "two_stage_cls":
        d_hvid = _cls_attention_backward(d_pooled, cache["att"], "across_", grads)
        b, n, t, dd = cache["token_shape"]
        flat_idx = cache["flat_idx"]
        d_hvid_flat = d_hvid.reshape(b * n, dd)[flat_idx]
        d_flat_tokens = _cls_attention_backward(
            d_hvid_flat, cache["within"], "within_", grads
        )
        d_tokens = np.zeros((b * n, t, dd))
        d_tokens[flat_idx] = d_flat_tokens
        d_tokens = d_tokens.reshape(b, n, t, dd)
        de = np.zeros((b, n, dd))
    else:  # pragma: no cover
        raise ValidationError(f"unknown pooling mode {mode!r}")

    de = de * mask[:, :, None]
    if config.use_view_embedding:
        view_ids = cache["view_ids"]
        table_grad = grads.get("view_table")
        if not isinstance(table_grad, np.ndarray):
            table_grad = np.zeros((len(VIEW_CLASSES), d))
        np.add.at(table_grad, view_ids[mask], de[mask])
        grads["view_table"] = table_grad
    return de, d_tokens


def pool_study(
    video_embs: np.ndarray,
    mask: Optional[np.ndarray],
    config: PoolingConfig,
    params: Dict[str, np.ndarray],
    tokens: Optional[np.ndarray] = None,
    token_mask: Optional[np.ndarray] = None,
    view_ids: Optional[np.ndarray] = None,
) -> PooledStudyState:
    """Pool one study's (N <= max_videos, d) embeddings."""
    e = require_finite(video_embs, "video embeddings")
    if e.ndim != 2:
        raise ValidationError("expected (videos, dim) embeddings")
    if mask is None:
        mask = np.ones(e.shape[0], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    pooled, weights, _ = pool_batch(
        e[None],
        mask[None],
        config,
        params,
        tokens=None if tokens is None else tokens[None],
        token_mask=None if token_mask is None else token_mask[None],
        view_ids=None if view_ids is None else np.asarray(view_ids)[None],
    )
    return PooledStudyState(embedding=pooled[0], weights=weights[0], mask=mask)


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


def dropout_mask(shape, rate: float, rng: Optional[Rng]) -> Optional[np.ndarray]:
    if rate <= 0.0:
        return None
    if rng is None:
        raise ValidationError("training dropout needs an rng or explicit mask")
    keep = 1.0 - rate
    return (rng.uniform(size=shape) < keep) / keep


def forward_heads(
    pooled: np.ndarray,
    params: Dict[str, np.ndarray],
    config: HeadConfig,
    training: bool = False,
    drop_mask: Optional[np.ndarray] = None,
    rng: Optional[Rng] = None,
):
    """Affine task heads over the pooled vector. Dropout is active only when
    ``training=True``; pass ``drop_mask`` to pin it (gradient checks) or
    ``rng`` to draw it."""
    single = pooled.ndim == 1
    z = pooled[None] if single else pooled
    z = require_finite(z, "pooled embedding")
    if z.shape[1] != params["head_regression_w"].shape[1]:
        raise ValidationError(
            f"pooled dim {z.shape[1]} != head input dim "
            f"{params['head_regression_w'].shape[1]}"
        )
    if training and drop_mask is None:
        drop_mask = dropout_mask(z.shape, config.dropout, rng)
    if training and drop_mask is not None:
        z = z * drop_mask
    preds = {}
    for task in ("regression",) + BINARY_TASKS:
        out = z @ params[f"head_{task}_w"].T + params[f"head_{task}_b"]
        preds["stenosis_pct" if task == "regression" else f"logits_{task}"] = (
            out[0] if single else out
        )
    cache = (z, drop_mask if training else None, single)
    return preds, cache


def heads_backward(
    d_preds: Dict[str, np.ndarray],
    cache,
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
) -> np.ndarray:
    z, drop_mask, single = cache
    d_z = np.zeros_like(z)
    for task in ("regression",) + BINARY_TASKS:
        key = "stenosis_pct" if task == "regression" else f"logits_{task}"
        if key not in d_preds:
            continue
        g = d_preds[key]
        g = g[None] if single else g
        grads[f"head_{task}_w"] = grads.get(f"head_{task}_w", 0.0) + g.T @ z
        grads[f"head_{task}_b"] = grads.get(f"head_{task}_b", 0.0) + g.sum(axis=0)
        d_z += g @ params[f"head_{task}_w"]
    if drop_mask is not None:
        d_z = d_z * drop_mask
    return d_z[0] if single else d_z


# ---------------------------------------------------------------------------
# Multi-task loss
# ---------------------------------------------------------------------------


def huber(e: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(e)
    return np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))


def huber_grad(e: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(e, -delta, delta)


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def multitask_loss(
    preds: Dict[str, np.ndarray],
    targets: Dict[str, np.ndarray],
    config: HeadConfig,
):
    """Total = stenosis_weight * mean Huber((pred-target)/100) + sum of the
    four binary tasks' mean BCE-with-logits. Returns
    (total, components, d_preds)."""
    config.validate()
    pred_pct = np.atleast_2d(np.asarray(preds["stenosis_pct"], dtype=np.float64))
    target_pct = np.atleast_2d(np.asarray(targets["stenosis_pct"], dtype=np.float64))
    if not np.all(np.isfinite(pred_pct)):
        raise ValidationError("non-finite prediction", code="non_finite")
    if pred_pct.shape != target_pct.shape:
        raise ValidationError("stenosis target shape mismatch")
    n = pred_pct.size
    e = (pred_pct - target_pct) / 100.0
    components = {"huber_stenosis": float(huber(e, config.huber_delta).mean())}
    d_preds = {
        "stenosis_pct": config.stenosis_weight
        * huber_grad(e, config.huber_delta)
        / (100.0 * n)
    }
    total = config.stenosis_weight * components["huber_stenosis"]
    for task in BINARY_TASKS:
        z = np.atleast_2d(np.asarray(preds[f"logits_{task}"], dtype=np.float64))
        y = np.atleast_2d(np.asarray(targets[task], dtype=np.float64))
        if not np.all(np.isfinite(z)):
            raise ValidationError("non-finite prediction", code="non_finite")
        if z.shape != y.shape:
            raise ValidationError(f"{task} label shape mismatch")
        components[f"bce_{task}"] = float(bce_with_logits(z, y).mean())
        total += components[f"bce_{task}"]
        sig = 1.0 / (1.0 + np.exp(-z))
        d_preds[f"logits_{task}"] = (sig - y) / z.size
    components["total"] = float(total)
    return float(total), components, d_preds


# ---------------------------------------------------------------------------
# Cohort tensors and training
# ---------------------------------------------------------------------------


@dataclass
class StudyTensors:
    embeddings: np.ndarray  # (B, max_videos, d)
    mask: np.ndarray  # (B, max_videos)
    targets: Dict[str, np.ndarray]
    study_ids: List[str]
    patient_ids: List[str]
    view_ids: np.ndarray  # (B, max_videos) int
    arteries: Optional[np.ndarray] = None  # (B, max_videos) "LCA"/"RCA"/""
    dominances: Optional[np.ndarray] = None  # (B,)


def study_targets(study: StudyRecord) -> Dict[str, np.ndarray]:
    labels = study.full_labels()
    if labels is None:
        raise ValidationError(f"study {study.study_id} has no labels", code="no_labels")
    binary = derive_binary_labels(labels)
    out = {"stenosis_pct": labels.stenosis_vector()}
    for task in BINARY_TASKS:
        out[task] = np.array(
            [binary[s][_TASK_TO_LABEL[task]] for s in SEGMENTS], dtype=np.float64
        )
    return out


def cohort_tensors(
    cohort: Cohort,
    studies: Sequence[StudyRecord],
    config: PoolingConfig,
    selection_mode: str = "inference",
    selection_seed: int = 0,
) -> StudyTensors:
    """Phase-assign, select up to max_videos diagnostic videos, and stack
    embeddings/targets for a list of studies."""
    b = len(studies)
    if b == 0:
        raise ValidationError("no studies")
    e = np.zeros((b, config.max_videos, config.embed_dim))
    mask = np.zeros((b, config.max_videos), dtype=bool)
    view_ids = np.zeros((b, config.max_videos), dtype=int)
    arteries = np.full((b, config.max_videos), "", dtype=object)
    targets = {k: np.zeros((b, len(SEGMENTS))) for k in ("stenosis_pct",) + BINARY_TASKS}
    study_ids, patient_ids, dominances = [], [], []
    view_index = {v: i for i, v in enumerate(VIEW_CLASSES)}
    for i, study in enumerate(studies):
        videos = assign_phases(study.videos)
        staged = replace(study, videos=videos)
        kept, m = select_diagnostic(
            staged, config.max_videos, mode=selection_mode, seed=selection_seed
        )
        for j, v in enumerate(kept):
            e[i, j] = cohort.embedding_for(v)
            view_ids[i, j] = view_index[v.view_class or "Other"]
            arteries[i, j] = v.artery
        mask[i] = m
        for k, vec in study_targets(study).items():
            targets[k][i] = vec
        study_ids.append(study.study_id)
        patient_ids.append(study.patient_id)
        dominances.append(study.dominance)
    return StudyTensors(
        e, mask, targets, study_ids, patient_ids, view_ids,
        arteries=arteries, dominances=np.asarray(dominances),
    )


@dataclass
class TrainedHeadModel:
    pooling_config: PoolingConfig
    head_config: HeadConfig
    params: Dict[str, np.ndarray]
    history: List[Tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = -1

    def save(self, path: str, extra_meta: Optional[dict] = None) -> None:
        meta = {
            "kind": "mil_head",
            "pooling": {
                "mode": self.pooling_config.mode,
                "num_heads": self.pooling_config.num_heads,
                "hidden_dim": self.pooling_config.hidden_dim,
                "dropout": self.pooling_config.dropout,
                "max_videos": self.pooling_config.max_videos,
                "seed": self.pooling_config.seed,
                "embed_dim": self.pooling_config.embed_dim,
                "use_view_embedding": self.pooling_config.use_view_embedding,
            },
            "heads": {
                "n_segments": self.head_config.n_segments,
                "stenosis_weight": self.head_config.stenosis_weight,
                "huber_delta": self.head_config.huber_delta,
                "dropout": self.head_config.dropout,
                "seed": self.head_config.seed,
            },
            "best_epoch": self.best_epoch,
        }
        meta.update(extra_meta or {})
        save_checkpoint(path, meta, self.params)

    @staticmethod
    def load(path: str) -> "TrainedHeadModel":
        meta, tensors = load_checkpoint(path)
        if meta.get("kind") != "mil_head":
            raise ValidationError(f"{path}: not a mil_head checkpoint")
        return TrainedHeadModel(
            pooling_config=PoolingConfig(**meta["pooling"]),
            head_config=HeadConfig(**meta["heads"]),
            params=tensors,
            best_epoch=int(meta.get("best_epoch", -1)),
        )


def _forward_backward(
    tensors: StudyTensors,
    idx: np.ndarray,
    pooling_config: PoolingConfig,
    head_config: HeadConfig,
    params: Dict[str, np.ndarray],
    training: bool,
    rng: Optional[Rng] = None,
):
    e = tensors.embeddings[idx]
    mask = tensors.mask[idx]
    view_ids = tensors.view_ids[idx] if pooling_config.use_view_embedding else None
    pooled, _, pool_cache = pool_batch(e, mask, pooling_config, params, view_ids=view_ids)
    pool_drop = None
    if training and pooling_config.dropout > 0:
        pool_drop = dropout_mask(pooled.shape, pooling_config.dropout, rng)
        pooled = pooled * pool_drop
    head_rng = rng.derive("heads") if (training and rng is not None) else None
    preds, head_cache = forward_heads(
        pooled, params, head_config, training=training, rng=head_rng
    )
    targets = {k: v[idx] for k, v in tensors.targets.items()}
    loss, components, d_preds = multitask_loss(preds, targets, head_config)
    grads: Dict[str, np.ndarray] = {}
    if training:
        d_pooled = heads_backward(d_preds, head_cache, params, grads)
        if pool_drop is not None:
            d_pooled = d_pooled * pool_drop
        pool_batch_backward(d_pooled, pool_cache, pooling_config, grads)
        for name in params:
            if name not in grads:
                grads[name] = np.zeros_like(params[name])
    return loss, components, grads


def train_heads(
    cohort: Cohort,
    pooling_config: PoolingConfig,
    head_config: HeadConfig,
    opt_config: OptimizerConfig,
    freeze_pooling: bool = False,
) -> TrainedHeadModel:
    """AdamW with cosine warm restarts; best checkpoint by validation total
    loss; deterministic under the configured seeds."""
    pooling_config.validate()
    head_config.validate()
    opt_config.validate()
    train_studies = cohort.studies_in_split("train")
    val_studies = cohort.studies_in_split("val")
    if not train_studies or not val_studies:
        raise ValidationError("train/val splits must both be non-empty")
    train_t = cohort_tensors(
        cohort, train_studies, pooling_config, "training", opt_config.seed
    )
    val_t = cohort_tensors(cohort, val_studies, pooling_config, "inference")

    params = init_pooling_params(pooling_config)
    params.update(init_head_params(pooling_config.pooled_dim, head_config))
    pooling_param_names = set(init_pooling_params(pooling_config))
    optimizer = AdamW(params, opt_config)
    rng = Rng(opt_config.seed).derive("train_heads")
    n = len(train_studies)
    batch = opt_config.batch_size or n
    history: List[Tuple[int, float, float]] = []
    best = None

    for epoch in range(opt_config.epochs):
        lr = lr_at_epoch(opt_config, epoch)
        order = rng.derive("order", epoch).permutation(n)
        total = 0.0
        for bstart in range(0, n, batch):
            idx = order[bstart : bstart + batch]
            loss, _, grads = _forward_backward(
                train_t,
                idx,
                pooling_config,
                head_config,
                params,
                training=True,
                rng=rng.derive("dropout", epoch, bstart),
            )
            if not np.isfinite(loss):
                warnings.warn("non-finite training loss; keeping best checkpoint")
                return _best_model(pooling_config, head_config, params, history, best)
            optimizer.step(
                params, grads, lr=lr,
                skip=pooling_param_names if freeze_pooling else None,
            )
            total += loss * idx.size
        val_loss, _, _ = _forward_backward(
            val_t,
            np.arange(len(val_studies)),
            pooling_config,
            head_config,
            params,
            training=False,
        )
        history.append((epoch, total / n, float(val_loss)))
        if best is None or val_loss < best[0]:
            best = (float(val_loss), epoch, {k: v.copy() for k, v in params.items()})
    return _best_model(pooling_config, head_config, params, history, best)


def _best_model(pooling_config, head_config, params, history, best) -> TrainedHeadModel:
    if best is None:
        return TrainedHeadModel(pooling_config, head_config, params, history, -1)
    return TrainedHeadModel(pooling_config, head_config, best[2], history, best[1])


def predict_batch(
    model: TrainedHeadModel,
    e: np.ndarray,
    mask: np.ndarray,
    view_ids: Optional[np.ndarray] = None,
):
    """Inference forward pass; returns predictions and attention weights."""
    if not model.pooling_config.use_view_embedding:
        view_ids = None
    pooled, weights, _ = pool_batch(
        e, mask, model.pooling_config, model.params, view_ids=view_ids
    )
    preds, _ = forward_heads(pooled, model.params, model.head_config, training=False)
    return preds, weights


# ---------------------------------------------------------------------------
# Ablation harness: single-video vs study-average vs multi-video attention
# ---------------------------------------------------------------------------


def _micro_auroc(scores: np.ndarray, labels: np.ndarray, patients: np.ndarray) -> float:
    from .evalstats import ScoredSamples, auroc

    return auroc(
        ScoredSamples(
            patient_ids=patients, scores=scores.reshape(-1), labels=labels.reshape(-1)
        )
    )


def ablation_harness(
    cohort: Cohort,
    model: TrainedHeadModel,
    split: str = "test",
) -> Dict[str, Dict[str, float]]:
    """Micro-averaged AUROC per binary task for the three inference
    strategies: each video alone against its territory's targets, the
    arithmetic mean of per-video predictions, and full attention pooling."""
    from .types import territory_of

    studies = cohort.studies_in_split(split) if cohort.split else list(cohort.studies)
    if not studies:
        raise ValidationError(f"no studies in split {split!r}")
    t = cohort_tensors(cohort, studies, model.pooling_config, "inference")
    preds_att, _ = predict_batch(model, t.embeddings, t.mask, t.view_ids)

    b, n_slots, d = t.embeddings.shape
    n_seg = len(SEGMENTS)
    flat = t.embeddings.reshape(b * n_slots, 1, d)
    flat_mask = np.ones((b * n_slots, 1), dtype=bool)
    flat_views = t.view_ids.reshape(b * n_slots, 1)
    preds_video, _ = predict_batch(model, flat, flat_mask, flat_views)

    # (video, segment) samples are restricted to the video's own territory
    # (dominance-adjusted): a single projection never shows the other artery.
    territory_ok = np.zeros((b, n_slots, n_seg), dtype=bool)
    for i in range(b):
        dom = t.dominances[i]
        seg_terr = np.asarray([territory_of(s, dom) for s in SEGMENTS])
        for j in range(n_slots):
            if t.mask[i, j]:
                territory_ok[i, j] = seg_terr == t.arteries[i, j]
    video_keep = territory_ok.reshape(-1, n_seg)

    results: Dict[str, Dict[str, float]] = {}
    patients = np.asarray(t.patient_ids)
    for task in BINARY_TASKS:
        labels = t.targets[task].astype(bool)  # (B, 18)
        per_video = preds_video[f"logits_{task}"].reshape(b, n_slots, n_seg)

        video_scores = per_video.reshape(-1, n_seg)[video_keep]
        video_labels = np.repeat(labels, n_slots, axis=0).reshape(-1, n_seg)[video_keep]
        video_patients = np.repeat(np.repeat(patients, n_slots), n_seg).reshape(
            -1, n_seg
        )[video_keep]

        counts = t.mask.sum(axis=1, keepdims=True).astype(np.float64)
        avg_scores = (per_video * t.mask[:, :, None]).sum(axis=1) / counts

        results[task] = {
            "single_video": _micro_auroc(video_scores, video_labels, video_patients),
            "study_average": _micro_auroc(
                avg_scores, labels, np.repeat(patients, n_seg)
            ),
            "multi_video_attention": _micro_auroc(
                preds_att[f"logits_{task}"], labels, np.repeat(patients, n_seg)
            ),
        }
    return results
