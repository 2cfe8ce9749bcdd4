"""Deterministic stand-in encoders.

``stub_encode`` replaces the commodity video backbone: a seeded fixed random
projection of summary features to a unit-norm 512-d vector. The text side is
a seeded hashed bag-of-tokens projection. Both are bit-reproducible across
platforms (hashing via blake2b, RNG via the counter-based generator).
"""

from __future__ import annotations

import hashlib
import re
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .numerics import Rng
from .study import EMBEDDING_DIM
from .types import VideoRecord

_FEATURE_WIDTH = 64  # fixed input width of the stub projection (incl. bias slot)


def stub_encode(features: Sequence[float], seed: int = 0) -> np.ndarray:
    """Project summary features (angles, fps, frame count, optional latent)
    to a unit-norm 512-d embedding. Same features + seed => same vector."""
    feats = np.asarray(features, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(feats)):
        raise ValidationError("non-finite features", code="non_finite")
    if feats.size > _FEATURE_WIDTH - 1:
        raise ValidationError(
            f"stub encoder accepts at most {_FEATURE_WIDTH - 1} features"
        )
    x = np.zeros(_FEATURE_WIDTH)
    x[0] = 1.0  # bias slot keeps the projection away from the zero vector
    x[1 : 1 + feats.size] = feats
    projection = Rng(seed).derive("stub_encoder").normal(
        size=(EMBEDDING_DIM, _FEATURE_WIDTH)
    ) / np.sqrt(_FEATURE_WIDTH)
    out = projection @ x
    return out / np.linalg.norm(out)


def video_features(video: VideoRecord) -> np.ndarray:
    return np.array(
        [
            video.primary_angle_deg / 180.0,
            video.secondary_angle_deg / 90.0,
            video.fps / 30.0,
            video.frame_count / 100.0,
        ]
    )


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def hashed_text_embedding(text: str, dim: int = EMBEDDING_DIM, seed: int = 0) -> np.ndarray:
    """Hashed bag-of-tokens text embedding, L2-normalized.

    Each lowercase token is hashed (blake2b keyed by the seed) to a signed
    coordinate; counts accumulate. Deterministic across platforms and runs.
    """
    if dim < 2:
        raise ValidationError("text embedding dim must be >= 2")
    vec = np.zeros(dim)
    key = seed.to_bytes(8, "little", signed=False)
    for token in _TOKEN_RE.findall(text.lower()):
        digest = hashlib.blake2b(token.encode("utf-8"), key=key, digest_size=8).digest()
        h = int.from_bytes(digest, "little")
        idx = (h >> 1) % dim
        sign = 1.0 if (h & 1) else -1.0
        vec[idx] += sign
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        vec[0] = 1.0  # empty/token-free text maps to a fixed unit vector
        norm = 1.0
    return vec / norm
