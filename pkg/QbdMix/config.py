from __future__ import annotations
from dataclasses import dataclass, asdict, field
from typing import Dict, Optional, Tuple
import logging
import os

from QbdMix.errors import UsageError

THREADS_ENV = "QBD_MIX_THREADS"


# ————————————————————————————————
# 1. TOLERANCE PRESETS
# ————————————————————————————————
@dataclass(frozen=True)
class Tolerances:
    """
    Numerical knobs shared by every solver.
    - tol:               fixed-point residual target for R and G
    - eps_tail:          truncation threshold for every infinite level sum
    - stochastic_tol:    per-row tolerance for row sums of a model
    - recurrence_margin: sp(R) must stay below 1 - margin
    """
    tol: float = 1e-12
    eps_tail: float = 1e-12
    stochastic_tol: float = 1e-12
    recurrence_margin: float = 1e-6
    max_sweeps: int = 64
    max_iters: int = 1_000_000
    horizon_cap: int = 10_000


TOLERANCE_PRESETS = {
    "desk": Tolerances(),
    "loose": Tolerances(tol=1e-10, eps_tail=1e-10),
}


def resolve_threads(default: int = 1) -> int:
    """Worker cap from QBD_MIX_THREADS; bad values fall back to the default."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value < 1:
        logging.getLogger("QbdMix").warning(f"Ignoring {THREADS_ENV}={raw!r}; using {default}")
        return default
    return value


# ————————————————————————————————
# 2. RUN CONFIGURATION
# ————————————————————————————————
@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings of one CLI invocation."""
    command: str
    model_path: Optional[str] = None
    builtin: Optional[str] = None
    params: Dict[str, float] = field(default_factory=dict)
    window: Tuple[int, int] = (8, 8)
    tol: float = 1e-12
    eps_tail: float = 1e-12
    pin_policy: str = "diagonal_mfpt"
    pin_second: str = "oracle_diagonal"
    output_format: str = "json"
    seed: int = 1
    paths: int = 10_000
    truncation: Optional[int] = None
    start: Optional[Tuple[int, int]] = None
    target: Optional[Tuple[int, int]] = None
    mixing: bool = False
    dual_route: bool = False
    profile: str = "desk"
    threads: int = 1
    record_path: Optional[str] = None
    log_level: str = "WARNING"

    def __post_init__(self) -> None:
        if (self.model_path is None) == (self.builtin is None):
            raise UsageError("exactly one of --model or --builtin is required")
        if len(self.window) != 2 or min(self.window) < 0:
            raise UsageError(f"window limits must be >= 0, got {self.window}")
        for name in ("tol", "eps_tail"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise UsageError(f"{name} must lie in (0, 1), got {value}")
        if self.paths < 0:
            raise UsageError(f"paths must be >= 0, got {self.paths}")
        if self.output_format not in ("json", "csv"):
            raise UsageError(f"unknown output format {self.output_format!r}")
        if self.truncation is not None and self.truncation < 1:
            raise UsageError(f"truncation must be >= 1, got {self.truncation}")
        if self.threads < 1:
            raise UsageError(f"threads must be >= 1, got {self.threads}")

    @property
    def oracle_truncation(self) -> int:
        return self.truncation if self.truncation is not None else self.window[1] + 25

    @property
    def tolerances(self) -> Tolerances:
        base = TOLERANCE_PRESETS[self.profile]
        return Tolerances(
            tol=self.tol, eps_tail=self.eps_tail, stochastic_tol=base.stochastic_tol,
            recurrence_margin=base.recurrence_margin, max_sweeps=base.max_sweeps,
            max_iters=base.max_iters, horizon_cap=base.horizon_cap,
        )

    @classmethod
    def from_namespace(cls, ns) -> "RunConfig":
        profile = getattr(ns, "profile", "desk")
        if profile not in TOLERANCE_PRESETS:
            raise UsageError(f"Invalid profile. Use: {', '.join(TOLERANCE_PRESETS)}")
        preset = TOLERANCE_PRESETS[profile]
        params = {k: getattr(ns, k) for k in ("p", "q", "rho", "levels", "phases", "model_seed")
                  if getattr(ns, k, None) is not None}
        return cls(
            command=ns.command,
            model_path=getattr(ns, "model", None),
            builtin=getattr(ns, "builtin", None),
            params=params,
            window=tuple(getattr(ns, "window", None) or (8, 8)),
            tol=ns.tol if getattr(ns, "tol", None) is not None else preset.tol,
            eps_tail=ns.eps_tail if getattr(ns, "eps_tail", None) is not None else preset.eps_tail,
            pin_policy=getattr(ns, "pin", "diagonal_mfpt"),
            pin_second=getattr(ns, "pin_second", "oracle_diagonal"),
            output_format=getattr(ns, "format", "json"),
            seed=getattr(ns, "seed", 1),
            paths=getattr(ns, "paths", 10_000),
            truncation=getattr(ns, "truncation", None),
            start=tuple(ns.start) if getattr(ns, "start", None) else None,
            target=tuple(ns.target) if getattr(ns, "target", None) else None,
            mixing=bool(getattr(ns, "mixing", False)),
            dual_route=bool(getattr(ns, "dual_route", False)),
            profile=profile,
            threads=resolve_threads(),
            record_path=getattr(ns, "record", None),
            log_level=getattr(ns, "log_level", "WARNING"),
        )

    def dict(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        d["oracle_truncation"] = self.oracle_truncation
        return d
