"""Feedback and updater agents over a chat provider, plus a scripted stand-in.

Both agents are single-turn conversations: a system prompt plus one user
message rendered from a template. The feedback agent turns the semantic
signal and the contexts into a critique; the updater applies the critique to
the current prompt and returns the next one.
"""

from __future__ import annotations

import enum
import logging
import random
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .context import StopWordPolicy, extract_lexical_units, tokenize
from .errors import ConfigError, ProtocolError
from .providers.base import NO_RETRY, ChatProvider, RetryPolicy
from .signal import IntensityState, SemanticSignal, TrendState

logger = logging.getLogger(__name__)

PLACEHOLDERS = frozenset({"current_prompt", "semantic_signal", "critique",
                          "local_context", "global_context", "target_hint"})
_REQUIRED = {
    "feedback_user": {"current_prompt", "semantic_signal", "local_context", "global_context"},
    "updater_user": {"current_prompt", "critique"},
}
_QUOTES = {'"': '"', "'": "'", "`": "`", "“": "”", "‘": "’"}


class AgentRole(str, enum.Enum):
    FEEDBACK = "feedback"
    UPDATER = "updater"


def _strip_comments(text: str) -> str:
    return "\n".join(line for line in text.splitlines() if not line.startswith("#")).strip("\n")


@dataclass(frozen=True)
class AgentTemplates:
    feedback_system: str
    updater_system: str
    feedback_user: str
    updater_user: str

    def __post_init__(self):
        for name in ("feedback_system", "updater_system", "feedback_user", "updater_user"):
            used = {f for _, f, _, _ in string.Formatter().parse(getattr(self, name)) if f is not None}
            unknown = used - PLACEHOLDERS
            if unknown:
                raise ConfigError(f"template {name} uses unknown placeholders {sorted(unknown)}")
            missing = _REQUIRED.get(name, set()) - used
            if missing:
                raise ConfigError(f"template {name} lacks placeholders {sorted(missing)}")

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "AgentTemplates":
        """Read the four ``*.txt`` templates from ``directory`` (shipped defaults if None)."""
        texts = {}
        for name in ("feedback_system", "updater_system", "feedback_user", "updater_user"):
            if directory is None:
                raw = resources.files("textdissect").joinpath(f"data/{name}.txt").read_text("utf-8")
            else:
                raw = Path(directory, f"{name}.txt").read_text("utf-8")
            texts[name] = _strip_comments(raw)
        return cls(**texts)


@dataclass(frozen=True)
class AgentRequest:
    role: AgentRole
    current_prompt: str
    semantic_signal: str = ""
    critique: str = ""
    local_context: str = ""
    global_context: str = ""
    target_hint: str = "the target class"
    signal: SemanticSignal | None = None  # structured copy; never rendered
    step: int = 0

    def __post_init__(self):
        if self.role is AgentRole.FEEDBACK and not self.semantic_signal:
            raise ValueError("a feedback request needs a semantic signal")
        if self.role is AgentRole.UPDATER and not self.critique:
            raise ValueError("an updater request needs a critique")


@dataclass(frozen=True)
class Critique:
    text: str
    step: int


@dataclass(frozen=True)
class Update:
    prompt: str
    no_op: bool = False
    truncated: bool = False


def render_messages(req: AgentRequest, templates: AgentTemplates) -> list:
    """The exact chat payload for a request. Pure: same inputs, same bytes."""
    values = {
        "current_prompt": req.current_prompt,
        "semantic_signal": req.semantic_signal,
        "critique": req.critique,
        "local_context": req.local_context,
        "global_context": req.global_context,
        "target_hint": req.target_hint,
    }
    if req.role is AgentRole.FEEDBACK:
        system, user = templates.feedback_system, templates.feedback_user
    else:
        system, user = templates.updater_system, templates.updater_user
    user_text = user.format_map(values)
    # collapse blank runs left by empty context sections
    while "\n\n\n" in user_text:
        user_text = user_text.replace("\n\n\n", "\n\n")
    return [
        {"role": "system", "content": system.format_map(values)},
        {"role": "user", "content": user_text.strip()},
    ]


def truncate_words(text: str, max_chars: int) -> str:
    if len(text) <= max_chars:
        return text
    cut = text[:max_chars]
    if not text[max_chars].isspace() and " " in cut:
        cut = cut.rsplit(" ", 1)[0]
    return cut.rstrip()


def _unquote(text: str) -> str:
    text = text.strip()
    if len(text) >= 2 and _QUOTES.get(text[0]) == text[-1]:
        text = text[1:-1].strip()
    return text


def run_feedback(req: AgentRequest, chat: ChatProvider, templates: AgentTemplates,
                 retry: RetryPolicy = NO_RETRY, max_chars: int = 2000) -> Critique:
    if req.role is not AgentRole.FEEDBACK:
        raise ValueError("run_feedback needs a feedback request")
    messages = render_messages(req, templates)
    text = retry.call(lambda: chat.complete(messages, request=req), "feedback agent").strip()
    if not text:
        raise ProtocolError("feedback agent returned an empty critique")
    if len(text) > max_chars:
        logger.warning("critique of %d characters truncated to %d", len(text), max_chars)
        text = truncate_words(text, max_chars)
    return Critique(text, req.step)


def run_updater(req: AgentRequest, chat: ChatProvider, templates: AgentTemplates,
                retry: RetryPolicy = NO_RETRY, max_chars: int = 1000) -> Update:
    if req.role is not AgentRole.UPDATER:
        raise ValueError("run_updater needs an updater request")
    messages = render_messages(req, templates)
    text = _unquote(retry.call(lambda: chat.complete(messages, request=req), "updater agent"))
    if not text:
        raise ProtocolError("updater agent returned an empty prompt")
    truncated = len(text) > max_chars
    if truncated:
        logger.warning("updated prompt of %d characters truncated to %d", len(text), max_chars)
        text = truncate_words(text, max_chars)
    return Update(text, no_op=text == req.current_prompt.strip(), truncated=truncated)


# --- scripted agents ---------------------------------------------------------
#
# Critique grammar understood by the scripted updater:
#   "add w1 w2"  |  "remove w1 w2"  |  "swap a with b, c with d"  |  "keep"

EDIT_SIZE = {IntensityState.MICRO: 1, IntensityState.MODERATE: 2, IntensityState.STRONG: 3}
_SCRIPT_POLICY = None


def _policy() -> StopWordPolicy:
    global _SCRIPT_POLICY
    if _SCRIPT_POLICY is None:
        _SCRIPT_POLICY = StopWordPolicy.default()
    return _SCRIPT_POLICY


def _revert(critique: str | None) -> str | None:
    if not critique:
        return None
    verb, _, rest = critique.partition(" ")
    if verb == "add":
        return f"remove {rest}"
    if verb == "remove":
        return f"add {rest}"
    if verb == "swap":
        pairs = [p.split(" with ") for p in rest.split(", ")]
        return "swap " + ", ".join(f"{b} with {a}" for a, b in reversed(pairs))
    return None


def scripted_agent_step(prompt: str, signal: SemanticSignal, world_vocab, rng_seed: int,
                        last_edit: str | None = None, avoid=()) -> tuple:
    """One deterministic feedback+update step: returns ``(critique, next_prompt)``.

    up keeps the last edit and adds new vocabulary words, down reverts the
    last edit, flat swaps prompt words for vocabulary words. The number of
    words touched follows the intensity state. Words in ``avoid`` are never
    proposed.
    """
    vocab = list(dict.fromkeys(w.lower() for w in world_vocab))
    if not vocab:
        raise ValueError("scripted agent needs a non-empty vocabulary")
    rng = random.Random(f"{rng_seed}|{prompt}|{signal.trend_state.value}|{signal.intensity_state.value}")
    size = EDIT_SIZE[signal.intensity_state]
    present = set(tokenize(prompt))
    avoid = set(avoid)
    fresh = [w for w in vocab if w not in present and w not in avoid]

    critique = None
    if signal.trend_state is TrendState.DOWN:
        critique = _revert(last_edit)
    if critique is None and signal.trend_state is not TrendState.UP:
        content = extract_lexical_units(prompt, _policy())
        n = min(size, len(content), len(fresh))
        if n:
            out = rng.sample(content, n)
            new = rng.sample(fresh, n)
            critique = "swap " + ", ".join(f"{a} with {b}" for a, b in zip(out, new))
    if critique is None and fresh:
        critique = "add " + " ".join(rng.sample(fresh, min(size, len(fresh))))
    if critique is None:
        # vocabulary exhausted: shrink the prompt instead
        content = extract_lexical_units(prompt, _policy())
        n = min(size, len(content) - 1)
        critique = "remove " + " ".join(rng.sample(content, n)) if n > 0 else "keep"
    return critique, apply_critique(prompt, critique)


def apply_critique(prompt: str, critique: str) -> str:
    """The scripted updater rule. Unparseable critiques leave the prompt unchanged."""
    verb, _, rest = critique.strip().partition(" ")
    words = prompt.split()
    if verb == "add":
        return " ".join(words + rest.split())
    if verb == "remove":
        for tok in rest.split():
            for i in range(len(words) - 1, -1, -1):
                if tokenize(words[i]) == [tok]:
                    del words[i]
                    break
        return " ".join(words)
    if verb == "swap":
        for pair in rest.split(", "):
            old, sep, new = pair.partition(" with ")
            if not sep:
                continue
            for i, w in enumerate(words):
                if tokenize(w) == [old]:
                    words[i] = new
                    break
        return " ".join(words)
    return prompt


class ScriptedChat:
    """Deterministic chat provider driving both agent roles by rule.

    Reads the structured request passed alongside the rendered messages, so
    it works with any template text.
    """

    def __init__(self, vocabulary, seed: int = 0):
        self.vocabulary = list(vocabulary)
        self.seed = seed
        self.calls = 0
        self.last_edit = None
        self.rejected = set()  # words whose addition was reverted

    def complete(self, messages: list, request: AgentRequest | None = None) -> str:
        if request is None:
            raise ProtocolError("scripted chat needs the structured agent request")
        self.calls += 1
        if request.role is AgentRole.UPDATER:
            return apply_critique(request.current_prompt, request.critique)
        if request.signal is None:
            raise ProtocolError("scripted feedback needs the structured signal")
        critique, _ = scripted_agent_step(request.current_prompt, request.signal, self.vocabulary,
                                          self.seed * 100_003 + self.calls, self.last_edit, self.rejected)
        reverting = request.signal.trend_state is TrendState.DOWN and critique == _revert(self.last_edit)
        if reverting and self.last_edit.startswith("add "):
            self.rejected.update(self.last_edit.split()[1:])
        self.last_edit = None if reverting or critique == "keep" else critique
        return critique
