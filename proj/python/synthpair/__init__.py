"""Synthetic caption-image dataset pipeline and desk-scale contrastive training."""

import json as _json

from ._core import (
    Combiner,
    ConceptBank,
    EndpointUnavailable,
    Error,
    Matcher,
    MatchMode,
    MissingArtifact,
    NSFW_SYSTEM_PROMPT,
    balance_plan,
    caption_prompt,
    clip_loss,
    corpus_stats,
    delta_mtl,
    mock_caption,
    normalize_text,
    read_metrics,
    recall_at_k,
    render_mock,
    text_features,
)
from ._core import run_mock_pipeline as _run_mock_pipeline


def run_mock_pipeline(concepts, workdir, *, target_size, seed=0, captions_per_concept=2):
    """Runs every stage offline and returns the per-stage summaries."""
    return _json.loads(
        _run_mock_pipeline(str(concepts), str(workdir), seed, captions_per_concept, target_size)
    )


__all__ = [name for name in dir() if not name.startswith("_")]
