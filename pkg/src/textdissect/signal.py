"""Turn the scalar class-probability stream into a textual guidance signal.

The score of the target class is compared against an exponential moving
average of its past values (trend) and against a high-confidence threshold
(intensity). Both quantities are discretized and used as keys into two small
lookup tables whose fragments are joined into the signal handed to the
feedback agent.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping

from .errors import ConfigError

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class TrendState(str, enum.Enum):
    UP = "up"
    DOWN = "down"
    FLAT = "flat"


class IntensityState(str, enum.Enum):
    STRONG = "strong"
    MODERATE = "moderate"
    MICRO = "micro"


@dataclass(frozen=True)
class SignalConfig:
    epsilon: float = 1e-4
    tau_high: float = 1e-2
    alpha: float = 0.3
    intensity_enabled: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.tau_high <= 1:
            raise ConfigError(f"tau_high must lie in (0, 1], got {self.tau_high}")
        if not self.epsilon < self.tau_high:
            raise ConfigError("epsilon must be smaller than tau_high")
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")


@dataclass(frozen=True)
class EmaState:
    alpha: float = 0.3
    smoothed: float = 0.0
    initialized: bool = False


def ema_update(state: EmaState, score: float) -> EmaState:
    """Fold one score into the moving average. The first score seeds it."""
    _check_score(score)
    if not state.initialized:
        return replace(state, smoothed=float(score), initialized=True)
    smoothed = state.alpha * score + (1.0 - state.alpha) * state.smoothed
    return replace(state, smoothed=smoothed)


def compute_trend(score: float, ema_prev: EmaState) -> float:
    if not ema_prev.initialized:
        raise ValueError("trend needs an initialized moving average")
    _check_score(score)
    return score - ema_prev.smoothed


def classify_trend(t: float, cfg: SignalConfig) -> TrendState:
    if t > cfg.epsilon:
        return TrendState.UP
    if t < -cfg.epsilon:
        return TrendState.DOWN
    return TrendState.FLAT


def compute_intensity(score: float, cfg: SignalConfig) -> float:
    _check_score(score)
    return max(0.0, cfg.tau_high - score)


def classify_intensity(i: float, cfg: SignalConfig) -> IntensityState:
    # cut points sit at thirds of [0, tau_high]; a value on a cut point
    # takes the weaker state
    if not cfg.intensity_enabled:
        return IntensityState.MODERATE
    if i <= cfg.tau_high / 3:
        return IntensityState.MICRO
    if i <= 2 * cfg.tau_high / 3:
        return IntensityState.MODERATE
    return IntensityState.STRONG


@dataclass(frozen=True)
class SignalTables:
    trend_table: Mapping[TrendState, str] = field(default_factory=dict)
    intensity_table: Mapping[IntensityState, str] = field(default_factory=dict)

    def validate(self) -> "SignalTables":
        for state in TrendState:
            if not self.trend_table.get(state, "").strip():
                raise ConfigError(f"signal table is missing trend.{state.value}")
        for state in IntensityState:
            if not self.intensity_table.get(state, "").strip():
                raise ConfigError(f"signal table is missing intensity.{state.value}")
        return self

    @classmethod
    def from_mapping(cls, flat: Mapping[str, str]) -> "SignalTables":
        """Build tables from flat ``trend.up``-style keys."""
        trend, intensity = {}, {}
        for key, text in flat.items():
            group, _, name = key.partition(".")
            try:
                if group == "trend":
                    trend[TrendState(name)] = str(text).strip()
                elif group == "intensity":
                    intensity[IntensityState(name)] = str(text).strip()
                else:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"unknown signal table key {key!r}") from None
        return cls(trend, intensity).validate()

    @classmethod
    def load(cls, path: str | Path | None = None) -> "SignalTables":
        """Read tables from a TOML key-value file; the shipped defaults if no path."""
        if path is None:
            text = resources.files("textdissect").joinpath("data/signal_tables.toml").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse signal tables: {exc}") from exc
        return cls.from_mapping(_flatten(doc))

    def as_dict(self) -> dict[str, str]:
        out = {f"trend.{k.value}": v for k, v in self.trend_table.items()}
        out.update({f"intensity.{k.value}": v for k, v in self.intensity_table.items()})
        return out


@dataclass(frozen=True)
class SemanticSignal:
    text: str
    trend_state: TrendState
    intensity_state: IntensityState


def compose_signal(ts: TrendState, is_: IntensityState, tables: SignalTables) -> SemanticSignal:
    try:
        head = tables.trend_table[ts]
        tail = tables.intensity_table[is_]
    except KeyError as exc:
        raise ConfigError(f"signal table has no entry for {exc.args[0]!r}") from None
    return SemanticSignal(f"{head} {tail}", TrendState(ts), IntensityState(is_))


def _flatten(doc: Mapping, prefix: str = "") -> dict[str, str]:
    out = {}
    for key, value in doc.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _check_score(score: float) -> None:
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score must lie in [0, 1], got {score}")
