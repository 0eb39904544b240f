"""Deterministic offline stand-ins for every remote service.

The lexical world replaces generator plus classifier with a keyword scorer:
each class owns a set of hidden weighted keywords, a text's logit for a
class is the summed weight of the keywords it contains, and probabilities are
a tempered softmax over those logits, optionally perturbed by seeded noise.
"""

from __future__ import annotations

import threading
import zlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..context import StopWordPolicy, extract_lexical_units, tokenize
from ..errors import ContentPolicyError, ProtocolError
from .base import SIMULATED_TEXT, RenderedSample


@dataclass(frozen=True)
class LexicalWorldSpec:
    hidden_keywords: tuple  # one {token: weight} mapping per class
    noise_sigma: float = 0.0
    temperature: float = 1.0
    rng_seed: int = 0
    class_names: tuple = ()

    def __post_init__(self):
        kws = tuple({str(k).lower(): float(w) for k, w in dict(m).items()} for m in self.hidden_keywords)
        object.__setattr__(self, "hidden_keywords", kws)
        if not kws:
            raise ValueError("a lexical world needs at least one class")
        for j, m in enumerate(kws):
            if not m:
                raise ValueError(f"class {j} has no keywords")
            if not all(np.isfinite(w) for w in m.values()):
                raise ValueError(f"class {j} has a non-finite keyword weight")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.class_names and len(self.class_names) != len(kws):
            raise ValueError("class_names must name every class")

    @property
    def class_count(self) -> int:
        return len(self.hidden_keywords)

    def vocabulary(self) -> list[str]:
        """Every keyword of every class, first-seen order."""
        seen = {}
        for m in self.hidden_keywords:
            for tok in m:
                seen.setdefault(tok, None)
        return list(seen)

    def salience(self, token: str) -> float:
        return max((abs(m.get(token, 0.0)) for m in self.hidden_keywords), default=0.0)

    @classmethod
    def from_dict(cls, doc: dict) -> "LexicalWorldSpec":
        classes = doc["classes"]
        names = tuple(c.get("name", str(i)) for i, c in enumerate(classes))
        return cls(
            hidden_keywords=tuple(c["keywords"] for c in classes),
            noise_sigma=float(doc.get("noise_sigma", 0.0)),
            temperature=float(doc.get("temperature", 1.0)),
            rng_seed=int(doc.get("rng_seed", 0)),
            class_names=names,
        )

    def to_dict(self) -> dict:
        names = self.class_names or tuple(str(i) for i in range(self.class_count))
        return {
            "classes": [{"name": n, "keywords": dict(m)} for n, m in zip(names, self.hidden_keywords)],
            "noise_sigma": self.noise_sigma,
            "temperature": self.temperature,
            "rng_seed": self.rng_seed,
        }


_POLICY = None


def _default_policy() -> StopWordPolicy:
    global _POLICY
    if _POLICY is None:
        _POLICY = StopWordPolicy.default()
    return _POLICY


def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def lexical_world_logits(spec: LexicalWorldSpec, text: str, policy: StopWordPolicy | None = None) -> np.ndarray:
    tokens = extract_lexical_units(text, policy or _default_policy())
    return np.array([sum(m.get(t, 0.0) for t in tokens) for m in spec.hidden_keywords], dtype=float)


def lexical_world_score(spec: LexicalWorldSpec, text: str, step: int = 0,
                        policy: StopWordPolicy | None = None) -> np.ndarray:
    """Class probabilities for ``text``; ``step`` indexes the noise stream."""
    logits = lexical_world_logits(spec, text, policy)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.rng_seed, _stable_hash(text), step])
        logits = logits + rng.normal(0.0, spec.noise_sigma, size=logits.shape)
    z = logits / spec.temperature
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


class IdentityGenerator:
    """Generator whose "image" is the prompt text itself."""

    def __init__(self, blocked_words=()):
        self.blocked_words = frozenset(w.lower() for w in blocked_words)

    def generate(self, prompt: str) -> RenderedSample:
        hits = self.blocked_words.intersection(tokenize(prompt))
        if hits:
            raise ContentPolicyError(f"prompt rejected, blocked words: {sorted(hits)}")
        return RenderedSample(source_prompt=prompt, media_kind=SIMULATED_TEXT, carried_text=prompt)


class LexicalWorldClassifier:
    """Scores carried text with a lexical world.

    The noise stream is indexed per distinct text by how many times that text
    has been scored, so concurrent queries on different texts stay
    reproducible.
    """

    def __init__(self, spec: LexicalWorldSpec, policy: StopWordPolicy | None = None):
        self.spec = spec
        self.policy = policy
        self._seen = Counter()
        self._lock = threading.Lock()

    def classify(self, sample: RenderedSample) -> list:
        if sample.media_kind != SIMULATED_TEXT:
            raise ProtocolError("the lexical world only scores simulated-text samples")
        with self._lock:
            step = self._seen[sample.carried_text]
            self._seen[sample.carried_text] += 1
        return lexical_world_score(self.spec, sample.carried_text, step, self.policy).tolist()


@dataclass
class ToyEmbedder:
    """Hashed bag-of-words embedding, L2-normalized.

    Each token is hashed (with the seed) into one of ``dim`` buckets and
    counted. Word order is irrelevant; texts with disjoint vocabularies are
    orthogonal unless two of their tokens share a bucket.
    """

    dim: int = 2048
    seed: int = 0

    def bucket(self, token: str) -> int:
        return _stable_hash(f"{self.seed}:{token}") % self.dim

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for tok in tokenize(text):
            vec[self.bucket(tok)] += 1.0
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise ValueError(f"text {text!r} has no word tokens to embed")
        return vec / norm


@dataclass
class SimCaptioner:
    """Describes carried text by its lexical units.

    With a world attached, units are ordered by their strongest keyword weight
    (a stand-in for visual salience) before truncation to ``n``.
    """

    world: LexicalWorldSpec | None = None
    policy: StopWordPolicy = field(default_factory=StopWordPolicy.default)

    def caption(self, sample: RenderedSample, n: int) -> list:
        if sample.media_kind != SIMULATED_TEXT:
            raise ProtocolError("the simulated captioner needs simulated-text samples")
        units = extract_lexical_units(sample.carried_text, self.policy)
        if self.world is not None:
            units = sorted(units, key=lambda t: -self.world.salience(t))
        return units[:n]
