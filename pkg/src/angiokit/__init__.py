"""Study-level coronary angiography analysis engine.

Operates on per-video embeddings and structured report text: view
classification, phase assignment, report parsing, contrastive video-text
alignment, multi-video attention pooling with multi-task heads, evaluation
statistics, embedding analytics, and a near-real-time inference service.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    AngiokitError,
    ParseError,
    UndefinedMetricError,
    ValidationError,
)
