"""Exception hierarchy shared by the engine."""


class DissectError(Exception):
    """Base class for engine errors."""


class ConfigError(DissectError):
    """Invalid or incomplete configuration."""


class TransportError(DissectError):
    """A provider call failed in transit. Safe to retry."""


class ProtocolError(DissectError):
    """A provider answered with content that violates its contract. Not retried."""


class ContentPolicyError(DissectError):
    """The generator refused a prompt. The step is skipped, never retried."""


class ReplayDivergence(DissectError):
    """A replayed trace disagrees with its recorded derived fields."""

    def __init__(self, step, field, recorded=None, recomputed=None):
        self.step = step
        self.field = field
        self.recorded = recorded
        self.recomputed = recomputed
        super().__init__(
            f"replay diverged at step {step}: field {field!r} "
            f"recorded={recorded!r} recomputed={recomputed!r}"
        )


class SchemaError(DissectError):
    """A persisted document carries an unknown schema version."""
