"""Provider value types and capability protocols, plus the shared retry policy."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, TypeVar, runtime_checkable

import numpy as np

from ..errors import ProtocolError, TransportError

logger = logging.getLogger(__name__)

T = TypeVar("T")

IMAGE = "image"
SIMULATED_TEXT = "simulated-text"


@dataclass(frozen=True)
class RenderedSample:
    source_prompt: str
    media_kind: str
    payload: bytes | None = None
    carried_text: str | None = None

    def __post_init__(self):
        if self.media_kind == IMAGE:
            ok = self.payload is not None and self.carried_text is None
        elif self.media_kind == SIMULATED_TEXT:
            ok = self.carried_text is not None and self.payload is None
        else:
            raise ValueError(f"unknown media kind {self.media_kind!r}")
        if not ok:
            raise ValueError("a rendered sample carries exactly one payload kind")


@dataclass(frozen=True)
class ProbabilityVector:
    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ProtocolError("empty probability vector")
        if any(not math.isfinite(v) or v < 0.0 or v > 1.0 for v in vals):
            raise ProtocolError(f"probabilities outside [0, 1]: {vals}")
        if abs(math.fsum(vals) - 1.0) > 1e-6:
            raise ProtocolError(f"probabilities sum to {math.fsum(vals)}, not 1")
        object.__setattr__(self, "values", vals)

    @property
    def class_count(self) -> int:
        return len(self.values)

    def __getitem__(self, j: int) -> float:
        return self.values[j]

    def argmax(self) -> int:
        # ties resolve to the lowest class index
        return int(np.argmax(self.values))

    @classmethod
    def from_raw(cls, raw: Sequence[float]) -> "ProbabilityVector":
        """Accept a service response, renormalizing mild drift.

        A sum within [0.5, 2.0] is rescaled to 1 with a warning; anything
        further off is a protocol error.
        """
        vals = [float(v) for v in raw]
        if not vals or any(not math.isfinite(v) or v < 0.0 for v in vals):
            raise ProtocolError(f"invalid probability response: {raw!r}")
        total = math.fsum(vals)
        if abs(total - 1.0) <= 1e-6:
            return cls(tuple(vals))
        if not 0.5 <= total <= 2.0:
            raise ProtocolError(f"probability response sums to {total}")
        logger.warning("classifier response summed to %.6f; renormalized", total)
        return cls(tuple(v / total for v in vals))


@runtime_checkable
class Generator(Protocol):
    def generate(self, prompt: str) -> RenderedSample: ...


@runtime_checkable
class Classifier(Protocol):
    def classify(self, sample: RenderedSample) -> Sequence[float]: ...


@runtime_checkable
class ChatProvider(Protocol):
    def complete(self, messages: list, request=None) -> str: ...


@runtime_checkable
class Embedder(Protocol):
    def embed(self, text: str) -> np.ndarray: ...


@runtime_checkable
class Captioner(Protocol):
    def caption(self, sample: RenderedSample, n: int) -> list: ...


@dataclass
class RetryPolicy:
    """Exponential backoff on transport errors; other errors pass through."""

    attempts: int = 3
    base_delay: float = 0.5
    max_delay: float = 8.0
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)

    def delay(self, retry_index: int) -> float:
        return min(self.max_delay, self.base_delay * 2 ** retry_index)

    def call(self, fn: Callable[[], T], what: str = "provider call") -> T:
        for attempt in range(1, self.attempts + 1):
            try:
                return fn()
            except TransportError as exc:
                if attempt == self.attempts:
                    raise
                wait = self.delay(attempt - 1)
                logger.warning("%s failed (attempt %d/%d): %s; retrying in %.2fs",
                               what, attempt, self.attempts, exc, wait)
                self.sleep(wait)
        raise AssertionError("unreachable")


NO_RETRY = RetryPolicy(attempts=1)
