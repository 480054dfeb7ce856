"""Exception types shared across the library.

Every error raised by emalab derives from :class:`EmaLabError`, so callers
can catch one type at the CLI boundary and map it to an exit code.
"""


class EmaLabError(Exception):
    """Base class for all emalab errors."""


class DimensionError(EmaLabError):
    """Operand shapes do not conform to an operation's signature."""


class NumericError(EmaLabError):
    """A non-finite value (NaN/Inf) was detected at an op boundary."""


class ContractError(EmaLabError):
    """A caller violated an operation's pre-condition."""


class ConfigError(EmaLabError):
    """An invalid configuration value or structure."""


class ParseError(EmaLabError):
    """Malformed external input (CSV rows, config files)."""


class TrainingAborted(EmaLabError):
    """Training stopped because the loss or an activation went non-finite.

    Carries enough context to produce the CLI diagnostic: the step index
    and the first stage whose activation was non-finite (when known).
    """

    def __init__(self, step: int, stage: str | None, detail: str = ""):
        self.step = step
        self.stage = stage
        msg = f"non-finite value at step {step}"
        if stage is not None:
            msg += f", first non-finite activation in stage '{stage}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
