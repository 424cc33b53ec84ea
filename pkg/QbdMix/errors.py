from __future__ import annotations
from typing import Optional, TYPE_CHECKING

if TYPE_CHECKING:
    from QbdMix.model import ValidationReport


class QbdMixError(Exception):
    """Root of every error raised by QbdMix."""


# ————————————————————————————————
# MODEL INGESTION
# ————————————————————————————————
class ModelParseError(QbdMixError, ValueError):
    """Model file does not parse under the schema."""

    def __init__(self, message: str, field: Optional[str] = None,
                 line: Optional[int] = None, column: Optional[int] = None):
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}, column {column}")
        super().__init__(f"{message} ({'; '.join(where)})" if where else message)
        self.field = field
        self.line = line
        self.column = column


class StructureError(QbdMixError, ValueError):
    """Blocks do not fit together into a usable chain."""

    def __init__(self, message: str, level: int):
        super().__init__(f"level {level}: {message}")
        self.level = level


class ModelValidationError(QbdMixError, ValueError):
    def __init__(self, report: "ValidationReport"):
        kinds = sorted({v.kind for v in report.violations})
        super().__init__(f"model failed validation: {len(report.violations)} violation(s) [{', '.join(kinds)}]")
        self.report = report


class NotRecurrentError(QbdMixError, ValueError):
    def __init__(self, spectral_radius: float, detail: str = ""):
        msg = f"tail not positive recurrent: sp(R) = {spectral_radius:.12g}"
        super().__init__(f"{msg} ({detail})" if detail else msg)
        self.spectral_radius = spectral_radius


# ————————————————————————————————
# NUMERICS
# ————————————————————————————————
class NonConvergenceError(QbdMixError, ArithmeticError):
    def __init__(self, message: str, last_residual: float = float("nan"), iterations: int = 0):
        super().__init__(f"{message} (last residual {last_residual:.3e} after {iterations} iterations)")
        self.last_residual = last_residual
        self.iterations = iterations


class NumericError(QbdMixError, ArithmeticError):
    def __init__(self, message: str, level: Optional[int] = None):
        super().__init__(f"level {level}: {message}" if level is not None else message)
        self.level = level


class StationaryUnderflowError(NumericError):
    """A stationary entry is too small to invert."""


class InconsistentSystemError(NumericError):
    def __init__(self, defect: float):
        super().__init__(f"censored system inconsistent: max |v0 g| = {defect:.3e}")
        self.defect = defect


# ————————————————————————————————
# SIMULATION / CLI
# ————————————————————————————————
class CapExceededError(QbdMixError, RuntimeError):
    def __init__(self, unfinished: int, cap: int):
        super().__init__(f"cap exceeded: {unfinished} path(s) still running after {cap} steps")
        self.unfinished = unfinished
        self.cap = cap


class UsageError(QbdMixError, ValueError):
    """Invalid command-line usage or run configuration."""
