"""Global and local optimization context.

The global context keeps every prompt whose target score cleared
``tau_best`` together with a small, capacity-bounded ranking of the single
words that activate the target class most strongly. The local context is a
FIFO window of recent (prompt, critique) pairs.
"""

from __future__ import annotations

import logging
import re
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

logger = logging.getLogger(__name__)

_WORD = re.compile(r"[^\W_]+(?:['\-][^\W_]+)*", re.UNICODE)

GLOBAL_PROMPTS_HEADER = "## High-scoring prompts"
GLOBAL_UNITS_HEADER = "## High-activation concepts"
LOCAL_HEADER = "## Recent prompt-feedback history"


@dataclass(frozen=True)
class ScoredPrompt:
    prompt: str
    score: float
    step: int


@dataclass(frozen=True)
class LexicalUnit:
    token: str
    score: float
    step: int = 0  # step at which the token was first scored; tie-break key


@dataclass(frozen=True)
class StopWordPolicy:
    stop_words: frozenset
    min_token_length: int = 2

    @classmethod
    def default(cls) -> "StopWordPolicy":
        text = resources.files("textdissect").joinpath("data/stopwords.txt").read_text("utf-8")
        return cls(_parse_words(text))

    @classmethod
    def from_file(cls, path: str | Path, min_token_length: int = 2) -> "StopWordPolicy":
        words = _parse_words(Path(path).read_text("utf-8"))
        if not words:
            raise ValueError(f"stop-word file {path} is empty")
        return cls(words, min_token_length)


def _parse_words(text: str) -> frozenset:
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip() and not w.startswith("#"))


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens, punctuation dropped. Hyphens and apostrophes inside words are kept."""
    return [m.group(0).lower() for m in _WORD.finditer(text)]


def extract_lexical_units(prompt: str, policy: StopWordPolicy) -> list[str]:
    seen = set()
    units = []
    for tok in tokenize(prompt):
        if tok in seen or tok in policy.stop_words or len(tok) < policy.min_token_length:
            continue
        seen.add(tok)
        units.append(tok)
    return units


def _rank_key(unit: LexicalUnit):
    return (-unit.score, unit.step, unit.token)


@dataclass
class GlobalContext:
    capacity_m: int = 5
    tau_best: float = 1e-2
    enabled: bool = True
    policy: StopWordPolicy = field(default_factory=StopWordPolicy.default)
    p_best: list = field(default_factory=list)
    d_best: list = field(default_factory=list)
    best_seen: ScoredPrompt | None = None

    def __post_init__(self):
        if self.capacity_m < 1:
            raise ValueError("capacity_m must be positive")
        if not 0 < self.tau_best <= 1:
            raise ValueError("tau_best must lie in (0, 1]")

    def admit_prompt(self, prompt: str, score: float, step: int) -> bool:
        """Record a scored prompt; returns True when it entered ``p_best``."""
        if self.best_seen is None or score > self.best_seen.score:
            self.best_seen = ScoredPrompt(prompt, score, step)
        if not self.enabled or score < self.tau_best:
            return False
        self.p_best.append(ScoredPrompt(prompt, score, step))
        return True

    def merge_units(self, scored: Iterable[LexicalUnit]) -> None:
        if not self.enabled:
            return
        best = {u.token: u for u in self.d_best}
        for unit in scored:
            cur = best.get(unit.token)
            if cur is None or _rank_key(unit) < _rank_key(cur):
                best[unit.token] = unit
        self.d_best = sorted(best.values(), key=_rank_key)[: self.capacity_m]

    def final_descriptors(self, top_k: int) -> list[LexicalUnit]:
        if top_k < 1:
            raise ValueError("top_k must be positive")
        if not self.enabled:
            # ablation arm: fall back to the words of the best prompt seen
            if self.best_seen is None:
                logger.warning("no prompt was scored; descriptor list is empty")
                return []
            b = self.best_seen
            units = [LexicalUnit(t, b.score, b.step) for t in extract_lexical_units(b.prompt, self.policy)]
            return units[:top_k]
        if not self.d_best:
            logger.warning("global context holds no lexical units; descriptor list is empty")
        return list(self.d_best[:top_k])

    def ranked_prompts(self) -> list[ScoredPrompt]:
        return sorted(self.p_best, key=lambda p: (-p.score, p.step))

    def render(self, max_prompts: int = 5) -> str:
        """Text block shown to the agents. Empty when the context is disabled."""
        if not self.enabled:
            return ""
        lines = [GLOBAL_PROMPTS_HEADER]
        ranked = self.ranked_prompts()[:max_prompts]
        if ranked:
            lines += [f"- ({p.score:.4f}) {p.prompt}" for p in ranked]
        else:
            lines.append("- (none yet)")
        lines.append(GLOBAL_UNITS_HEADER)
        if self.d_best:
            lines += [f"- {u.token} ({u.score:.4f})" for u in self.d_best]
        else:
            lines.append("- (none yet)")
        return "\n".join(lines)


@dataclass
class LocalContext:
    capacity_k: int = 10
    window: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity_k < 1:
            raise ValueError("capacity_k must be positive")
        self.window = deque(self.window, maxlen=self.capacity_k)

    def push(self, prompt: str, critique: str) -> None:
        self.window.append((prompt, critique))

    def render(self) -> str:
        if not self.window:
            return ""
        lines = [LOCAL_HEADER]
        for i, (prompt, critique) in enumerate(self.window, 1):
            lines.append(f"{i}. prompt: {prompt}\n   feedback: {critique}")
        return "\n".join(lines)
