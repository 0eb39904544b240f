"""The dissection loop.

Each step renders the current prompt, scores it with the black-box
classifier, turns the target-class probability into a semantic signal,
updates the global context when the score clears ``tau_best``, and asks the
feedback and updater agents for the next prompt. Every step is written to a
hash-chained JSON Lines trace that :func:`replay` can audit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import providers as prov
from .agents import AgentRequest, AgentRole, AgentTemplates, render_messages, run_feedback, run_updater
from .context import GlobalContext, LexicalUnit, LocalContext, ScoredPrompt, StopWordPolicy, extract_lexical_units
from .errors import ConfigError, ContentPolicyError, DissectError, ReplayDivergence, SchemaError
from .providers import ProbabilityVector, Providers
from .signal import (
    EmaState,
    SignalConfig,
    SignalTables,
    classify_intensity,
    classify_trend,
    compose_signal,
    compute_intensity,
    compute_trend,
    ema_update,
)

logger = logging.getLogger(__name__)

TRACE_SCHEMA = "textdissect.trace/1"
RESULT_SCHEMA = "textdissect.result/1"

CLASS_DISSECT = "class-dissect"
SLICE_DISCOVER = "slice-discover"

BUDGET = "budget"
EARLY_STOP = "early_stop"
OPERATOR_ABORT = "operator_abort"

SKIP_CRITIQUE = ("The image generator rejected the current prompt under its content policy. "
                 "Rephrase it so it can be rendered while keeping its intent.")


@dataclass
class RunConfig:
    target_class: int = 0
    max_steps: int = 1000
    early_stop_consecutive: int = 10
    epsilon: float = 1e-4
    tau_high: float = 1e-2
    tau_best: float = 1e-2
    alpha: float = 0.3
    m: int = 5
    k: int = 10
    top_k: int = 5
    init_prompt: str = "a picture of a random object"
    mode: str = CLASS_DISSECT
    global_context_enabled: bool = True
    intensity_enabled: bool = True
    seed: int = 0
    target_hint: str = ""
    include_raw_score: bool = False
    parallelism: int = 4
    max_prompt_chars: int = 1000
    max_critique_chars: int = 2000
    render_prompts: int = 5
    caption_n: int = 5
    record_payloads: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> "RunConfig":
        if self.target_class < 0:
            raise ConfigError("target_class must be >= 0")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        for name in ("early_stop_consecutive", "m", "k", "top_k", "parallelism", "caption_n"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.tau_best <= 1:
            raise ConfigError("tau_best must lie in (0, 1]")
        if self.top_k > self.m:
            raise ConfigError("top_k cannot exceed m")
        if not self.init_prompt.strip():
            raise ConfigError("init_prompt must be non-empty")
        if self.mode not in (CLASS_DISSECT, SLICE_DISCOVER):
            raise ConfigError(f"unknown mode {self.mode!r}")
        self.signal_config()
        return self

    def signal_config(self) -> SignalConfig:
        return SignalConfig(self.epsilon, self.tau_high, self.alpha, self.intensity_enabled)

    @property
    def hint(self) -> str:
        return self.target_hint or f"class index {self.target_class}"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown run settings: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class StepRecord:
    step: int
    prompt: str
    score: float | None = None
    probs: list | None = None
    trend: float | None = None
    trend_state: str | None = None
    intensity: float | None = None
    intensity_state: str | None = None
    ema: float | None = None  # moving average after folding in this step
    semantic_signal: str | None = None
    admitted_to_p_best: bool = False
    units_scored: list = field(default_factory=list)  # [token, score] pairs
    critique: str | None = None
    next_prompt: str | None = None
    no_op: bool = False
    skipped: str | None = None
    captions: list | None = None
    caption_error: str | None = None
    feedback_payload: list | None = None
    updater_payload: list | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {"kind": "step", **asdict(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> "StepRecord":
        doc = {k: v for k, v in doc.items() if k not in ("kind", "digest")}
        return cls(**doc)


@dataclass
class RunResult:
    descriptors: list
    best_prompts: list
    stop_reason: str
    steps_used: int
    target_class: int = 0
    warnings: list = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "schema": RESULT_SCHEMA,
            "target_class": self.target_class,
            "stop_reason": self.stop_reason,
            "steps_used": self.steps_used,
            "descriptors": [{"token": u.token, "score": u.score, "step": u.step} for u in self.descriptors],
            "best_prompts": [{"prompt": p.prompt, "score": p.score, "step": p.step} for p in self.best_prompts],
            "warnings": list(self.warnings),
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunResult":
        if doc.get("schema") != RESULT_SCHEMA:
            raise SchemaError(f"expected {RESULT_SCHEMA}, got {doc.get('schema')!r}")
        return cls(
            descriptors=[LexicalUnit(d["token"], d["score"], d["step"]) for d in doc["descriptors"]],
            best_prompts=[ScoredPrompt(p["prompt"], p["score"], p["step"]) for p in doc["best_prompts"]],
            stop_reason=doc["stop_reason"],
            steps_used=doc["steps_used"],
            target_class=doc.get("target_class", 0),
            warnings=list(doc.get("warnings", [])),
            error=doc.get("error"),
        )


def check_early_stop(history, j: int, n: int) -> bool:
    """True iff the last ``n`` probability vectors all put their argmax on class ``j``."""
    if n < 1:
        raise ValueError("n must be positive")
    if len(history) < n:
        return False
    return all(_argmax(v) == j for v in history[-n:])


def _argmax(v) -> int:
    values = v.values if isinstance(v, ProbabilityVector) else tuple(v)
    return max(range(len(values)), key=lambda i: (values[i], -i))


# --- trace persistence -------------------------------------------------------

def _canonical(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _chain(prev: str, doc: dict) -> str:
    return hashlib.sha256(prev.encode("ascii") + _canonical(doc)).hexdigest()


class TraceWriter:
    """Writes the trace one line at a time, flushing after every record."""

    def __init__(self, path: str | Path, header: dict):
        self.path = Path(path)
        self._fh = self.path.open("w", encoding="utf-8")
        header = {"kind": "header", "schema": TRACE_SCHEMA, **header}
        self._digest = _chain("", header)
        self._write({**header, "digest": self._digest})

    def _write(self, doc: dict) -> None:
        self._fh.write(json.dumps(doc, sort_keys=True, ensure_ascii=False) + "\n")
        self._fh.flush()

    def append(self, doc: dict) -> None:
        self._digest = _chain(self._digest, doc)
        self._write({**doc, "digest": self._digest})

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def trace_header(cfg: RunConfig, tables: SignalTables, policy: StopWordPolicy | None = None,
                 extra: dict | None = None) -> dict:
    policy = policy or StopWordPolicy.default()
    return {
        "config": asdict(cfg),
        "signal_tables": tables.as_dict(),
        "stop_words": sorted(policy.stop_words),
        "min_token_length": policy.min_token_length,
        **(extra or {}),
    }


def read_trace(path: str | Path):
    """Load and integrity-check a trace: returns ``(header, records, footer)``.

    A broken digest chain or an unparsable line raises ReplayDivergence
    naming the step it belongs to.
    """
    lines = Path(path).read_bytes().split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    if not lines:
        raise SchemaError(f"{path} is empty")
    docs = []
    for i, raw in enumerate(lines):
        try:
            line = raw.decode("utf-8")
            doc = json.loads(line)
        except (UnicodeDecodeError, json.JSONDecodeError):
            if i == 0:
                raise SchemaError(f"{path}: header is not valid JSON") from None
            raise ReplayDivergence(i - 1, "json", None, raw[:80]) from None
        # lines are written in one canonical form; any other spelling is an edit
        if not isinstance(doc, dict) or json.dumps(doc, sort_keys=True, ensure_ascii=False) != line:
            if i == 0:
                raise SchemaError(f"{path}: header is not in canonical form")
            where = doc.get("step", i - 1) if isinstance(doc, dict) else i - 1
            raise ReplayDivergence(where, "encoding", None, line[:80])
        docs.append(doc)
    header = docs[0]
    if header.get("kind") != "header" or header.get("schema") != TRACE_SCHEMA:
        raise SchemaError(f"{path}: expected trace schema {TRACE_SCHEMA}, got {header.get('schema')!r}")
    prev = ""
    records, footer = [], None
    for i, doc in enumerate(docs):
        body = {k: v for k, v in doc.items() if k != "digest"}
        expect = _chain(prev, body)
        where = "header" if i == 0 else body.get("step", i - 1)
        if doc.get("digest") != expect:
            raise ReplayDivergence(where, "digest", doc.get("digest"), expect)
        prev = expect
        if i == 0:
            continue
        if body.get("kind") == "step":
            try:
                records.append(StepRecord.from_dict(body))
            except TypeError as exc:
                raise ReplayDivergence(where, "record", None, str(exc)) from None
        elif body.get("kind") == "end":
            footer = body
    return header, records, footer


def write_result(result: RunResult, path: str | Path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2) + "\n", "utf-8")


def read_result(path: str | Path) -> RunResult:
    return RunResult.from_dict(json.loads(Path(path).read_text("utf-8")))


# --- the loop ----------------------------------------------------------------

class _Signals:
    """Moving average plus the signal derivation shared by run and replay."""

    def __init__(self, cfg: RunConfig, tables: SignalTables):
        self.scfg = cfg.signal_config()
        self.tables = tables
        self.ema = EmaState(alpha=cfg.alpha)

    def observe(self, score: float) -> dict:
        prev = self.ema if self.ema.initialized else ema_update(self.ema, score)
        trend = compute_trend(score, prev)
        self.ema = ema_update(prev, score) if self.ema.initialized else prev
        intensity = compute_intensity(score, self.scfg)
        signal = compose_signal(classify_trend(trend, self.scfg), classify_intensity(intensity, self.scfg), self.tables)
        return {
            "trend": trend,
            "trend_state": signal.trend_state.value,
            "intensity": intensity,
            "intensity_state": signal.intensity_state.value,
            "ema": self.ema.smoothed,
            "semantic_signal": signal.text,
            "_signal": signal,
        }


def _score_units(tokens, step, cfg, providers: Providers):
    def one(tok):
        try:
            sample = prov.generate(tok, providers.generator, providers.retry, cfg.max_prompt_chars)
        except ContentPolicyError as exc:
            logger.info("unit %r rejected by generator: %s", tok, exc)
            return None
        return prov.classify(sample, providers.classifier, providers.retry)[cfg.target_class]

    if not tokens:
        return []
    if cfg.parallelism == 1 or len(tokens) == 1:
        scores = [one(t) for t in tokens]
    else:
        with ThreadPoolExecutor(max_workers=min(cfg.parallelism, len(tokens))) as pool:
            scores = list(pool.map(one, tokens))
    return [LexicalUnit(t, s, step) for t, s in zip(tokens, scores) if s is not None]


def run(cfg: RunConfig, providers: Providers, templates: AgentTemplates | None = None,
        tables: SignalTables | None = None, policy: StopWordPolicy | None = None,
        trace: TraceWriter | None = None, clock=time.perf_counter) -> RunResult:
    cfg.validate()
    templates = templates or AgentTemplates.load()
    tables = tables or SignalTables.load()
    policy = policy or StopWordPolicy.default()
    gctx = GlobalContext(cfg.m, cfg.tau_best, cfg.global_context_enabled, policy)
    lctx = LocalContext(cfg.k)
    signals = _Signals(cfg, tables)
    history = []
    scored_tokens = set()
    warnings_, error = [], None
    stop_reason = BUDGET
    steps_used = 0
    prompt = cfg.init_prompt
    j = cfg.target_class

    try:
        for t in range(cfg.max_steps):
            t0 = clock()
            rec = StepRecord(step=t, prompt=prompt)
            steps_used = t + 1
            try:
                sample = prov.generate(prompt, providers.generator, providers.retry, cfg.max_prompt_chars)
            except ContentPolicyError as exc:
                rec.skipped = str(exc) or "content policy"
                logger.warning("step %d skipped: %s", t, rec.skipped)
                req = AgentRequest(AgentRole.UPDATER, prompt, critique=SKIP_CRITIQUE, target_hint=cfg.hint, step=t)
                upd = run_updater(req, providers.chat, templates, providers.retry, cfg.max_prompt_chars)
                rec.critique, rec.next_prompt, rec.no_op = SKIP_CRITIQUE, upd.prompt, upd.no_op
                if cfg.record_payloads:
                    rec.updater_payload = render_messages(req, templates)
                rec.wall_time = round(clock() - t0, 6)
                if trace:
                    trace.append(rec.to_dict())
                prompt = upd.prompt
                continue

            probs = prov.classify(sample, providers.classifier, providers.retry)
            if j >= probs.class_count:
                raise ConfigError(f"target class {j} out of range for {probs.class_count} classes")
            score = probs[j]
            derived = signals.observe(score)
            signal = derived.pop("_signal")
            rec.score, rec.probs = score, list(probs.values)
            for key, value in derived.items():
                setattr(rec, key, value)

            if gctx.admit_prompt(prompt, score, t):
                rec.admitted_to_p_best = True
                fresh = [u for u in extract_lexical_units(prompt, policy) if u not in scored_tokens]
                scored_tokens.update(fresh)
                units = _score_units(fresh, t, cfg, providers)
                gctx.merge_units(units)
                rec.units_scored = [[u.token, u.score] for u in units]
                if cfg.mode == SLICE_DISCOVER and providers.captioner is not None:
                    try:
                        rec.captions = prov.caption(sample, providers.captioner, cfg.caption_n, providers.retry)
                    except DissectError as exc:
                        rec.caption_error = f"{type(exc).__name__}: {exc}"
                        logger.warning("captioning failed at step %d: %s", t, exc)

            history.append(probs)
            if check_early_stop(history, j, cfg.early_stop_consecutive):
                stop_reason = EARLY_STOP
                rec.wall_time = round(clock() - t0, 6)
                if trace:
                    trace.append(rec.to_dict())
                break

            signal_text = signal.text
            if cfg.include_raw_score:
                signal_text = f"{signal_text} (target-class probability: {score:.6f})"
            freq = AgentRequest(
                AgentRole.FEEDBACK, prompt, semantic_signal=signal_text,
                local_context=lctx.render(), global_context=gctx.render(cfg.render_prompts),
                target_hint=cfg.hint, signal=signal, step=t,
            )
            critique = run_feedback(freq, providers.chat, templates, providers.retry, cfg.max_critique_chars)
            ureq = AgentRequest(AgentRole.UPDATER, prompt, critique=critique.text, target_hint=cfg.hint, step=t)
            upd = run_updater(ureq, providers.chat, templates, providers.retry, cfg.max_prompt_chars)
            lctx.push(prompt, critique.text)
            rec.critique, rec.next_prompt, rec.no_op = critique.text, upd.prompt, upd.no_op
            if cfg.record_payloads:
                rec.feedback_payload = render_messages(freq, templates)
                rec.updater_payload = render_messages(ureq, templates)
            rec.wall_time = round(clock() - t0, 6)
            if trace:
                trace.append(rec.to_dict())
            prompt = upd.prompt
    except KeyboardInterrupt:
        stop_reason = OPERATOR_ABORT
        error = "interrupted by operator"
        steps_used = max(0, steps_used - 1)
        logger.warning("run interrupted after %d steps", steps_used)
    except DissectError as exc:
        if isinstance(exc, ConfigError):
            raise
        stop_reason = OPERATOR_ABORT
        error = f"{type(exc).__name__}: {exc}"
        steps_used = max(0, steps_used - 1)
        logger.error("run aborted at step %d: %s", steps_used, error)

    descriptors = gctx.final_descriptors(cfg.top_k)
    if not descriptors:
        warnings_.append("no descriptors recovered")
    result = RunResult(descriptors, gctx.ranked_prompts(), stop_reason, steps_used, j, warnings_, error)
    if trace:
        trace.append({"kind": "end", "stop_reason": stop_reason, "steps_used": steps_used, "error": error})
    return result


# --- replay ------------------------------------------------------------------

_DERIVED = ("trend", "trend_state", "intensity", "intensity_state", "ema", "semantic_signal")


def replay(trace, cfg: RunConfig, tables: SignalTables | None = None,
           policy: StopWordPolicy | None = None, footer: dict | None = None) -> RunResult:
    """Recompute every derived field of a trace and compare it with the recorded value.

    Scores are taken from the trace; single-word unit scores are taken from
    the trace too, but the set of words that had to be scored is recomputed.
    Raises ReplayDivergence at the first mismatch.
    """
    tables = tables or SignalTables.load()
    policy = policy or StopWordPolicy.default()
    gctx = GlobalContext(cfg.m, cfg.tau_best, cfg.global_context_enabled, policy)
    signals = _Signals(cfg, tables)
    history, scored_tokens = [], set()
    j = cfg.target_class
    stop_reason = BUDGET

    def check(step, name, recorded, recomputed):
        if recorded != recomputed:
            raise ReplayDivergence(step, name, recorded, recomputed)

    records = list(trace)
    if len(records) > cfg.max_steps:
        raise ReplayDivergence(records[cfg.max_steps].step, "step", records[cfg.max_steps].step, "beyond budget")
    for i, rec in enumerate(records):
        check(rec.step, "step", rec.step, i)
        if i == 0:
            check(rec.step, "prompt", rec.prompt, cfg.init_prompt)
        if i + 1 < len(records):
            check(rec.step, "next_prompt", rec.next_prompt, records[i + 1].prompt)
        if rec.skipped:
            continue
        if rec.probs is None or rec.score is None:
            raise ReplayDivergence(rec.step, "score", rec.score, "missing")
        try:
            probs = ProbabilityVector(tuple(rec.probs))
        except DissectError as exc:
            raise ReplayDivergence(rec.step, "probs", rec.probs, str(exc)) from None
        check(rec.step, "score", rec.score, probs[j])
        derived = signals.observe(rec.score)
        derived.pop("_signal")
        for name in _DERIVED:
            check(rec.step, name, getattr(rec, name), derived[name])
        admitted = gctx.admit_prompt(rec.prompt, rec.score, rec.step)
        check(rec.step, "admitted_to_p_best", rec.admitted_to_p_best, admitted)
        expected = []
        if admitted:
            expected = [u for u in extract_lexical_units(rec.prompt, policy) if u not in scored_tokens]
            scored_tokens.update(expected)
        recorded_tokens = [u[0] for u in rec.units_scored]
        if any(t not in expected for t in recorded_tokens):
            check(rec.step, "units_scored", recorded_tokens, expected)
        gctx.merge_units(LexicalUnit(tok, float(s), rec.step) for tok, s in rec.units_scored)
        history.append(probs)
        stopped = check_early_stop(history, j, cfg.early_stop_consecutive)
        if stopped and i + 1 < len(records):
            raise ReplayDivergence(rec.step, "early_stop", False, True)
        if stopped:
            stop_reason = EARLY_STOP

    steps_used = len(records)
    if stop_reason != EARLY_STOP and steps_used < cfg.max_steps:
        stop_reason = OPERATOR_ABORT
    if footer is not None:
        last = records[-1].step if records else -1
        check(last, "stop_reason", footer.get("stop_reason"), stop_reason)
        check(last, "steps_used", footer.get("steps_used"), steps_used)
    descriptors = gctx.final_descriptors(cfg.top_k)
    warnings_ = [] if descriptors else ["no descriptors recovered"]
    return RunResult(descriptors, gctx.ranked_prompts(), stop_reason, steps_used, j, warnings_)


def replay_file(path: str | Path) -> RunResult:
    header, records, footer = read_trace(path)
    cfg = RunConfig.from_dict(header["config"])
    tables = SignalTables.from_mapping(header["signal_tables"])
    policy = None
    if "stop_words" in header:
        policy = StopWordPolicy(frozenset(header["stop_words"]), header.get("min_token_length", 2))
    return replay(records, cfg, tables, policy, footer=footer)
