"""External capabilities the engine calls through, whatever the backend.

The module-level functions are the calls the engine makes; they apply the
retry policy and enforce each capability's output contract regardless of
backend.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import ProtocolError
from .base import (
    IMAGE,
    NO_RETRY,
    SIMULATED_TEXT,
    Captioner,
    ChatProvider,
    Classifier,
    Embedder,
    Generator,
    ProbabilityVector,
    RenderedSample,
    RetryPolicy,
)

logger = logging.getLogger(__name__)

EMPTY_CAPTION = "<empty>"
MAX_PROMPT_CHARS = 1000


def generate(prompt: str, gen: Generator, retry: RetryPolicy = NO_RETRY,
             max_chars: int = MAX_PROMPT_CHARS) -> RenderedSample:
    if not prompt.strip():
        raise ValueError("cannot render an empty prompt")
    if len(prompt) > max_chars:
        raise ValueError(f"prompt exceeds {max_chars} characters")
    return retry.call(lambda: gen.generate(prompt), "generate")


def classify(sample: RenderedSample, clf: Classifier, retry: RetryPolicy = NO_RETRY) -> ProbabilityVector:
    return ProbabilityVector.from_raw(retry.call(lambda: clf.classify(sample), "classify"))


def embed(text: str, emb: Embedder, retry: RetryPolicy = NO_RETRY) -> np.ndarray:
    if not text.strip():
        raise ValueError("cannot embed empty text")
    vec = np.asarray(retry.call(lambda: emb.embed(text), "embed"), dtype=float)
    if vec.ndim != 1 or not np.all(np.isfinite(vec)):
        raise ProtocolError("embedding must be a finite 1-d vector")
    return vec


def caption(sample: RenderedSample, cap: Captioner, n: int, retry: RetryPolicy = NO_RETRY) -> list:
    """Exactly ``n`` descriptors; short answers are padded with EMPTY_CAPTION."""
    if n < 1:
        raise ValueError("n must be positive")
    out = [str(d).strip() for d in retry.call(lambda: cap.caption(sample, n), "caption")]
    if len(out) != n:
        logger.warning("captioner returned %d descriptors, expected %d", len(out), n)
        out = (out + [EMPTY_CAPTION] * n)[:n]
    return out


@dataclass
class Providers:
    """The set of backends one run talks to."""

    generator: Generator
    classifier: Classifier
    chat: ChatProvider
    embedder: Embedder | None = None
    captioner: Captioner | None = None
    retry: RetryPolicy = field(default_factory=RetryPolicy)


__all__ = [
    "EMPTY_CAPTION", "IMAGE", "MAX_PROMPT_CHARS", "NO_RETRY", "SIMULATED_TEXT",
    "Captioner", "ChatProvider", "Classifier", "Embedder", "Generator",
    "ProbabilityVector", "Providers", "RenderedSample", "RetryPolicy",
    "caption", "classify", "embed", "generate",
]
