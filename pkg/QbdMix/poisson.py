"""
Poisson equations for QBD chains.

Level 0 is handled through generalized inverses of the singular I - U0. The
generic block procedure for (I - P) A = B runs the RG-factorization backwards:

    C = (I - R_U)^-1 B
    X_0 = Z C_0 + e c0,        X_i = (I - U_i)^-1 C_i   (i >= 1)
    A = (I - G_L)^-1 X

The row vector c0 is free; each column of A is fixed up to one additive
constant, which a pin policy resolves.
"""
from __future__ import annotations
from dataclasses import dataclass, field
from enum import Enum
from threading import RLock
from typing import Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from QbdMix.errors import InconsistentSystemError, NumericError
from QbdMix.factorization import (
    BlockMatrixWindow, BlockRowSource, RgFactorization, ru_row,
)
from QbdMix.model import QbdModel
from QbdMix.stationary import StationaryWindow, censored_stationary
from QbdMix.utils import max_norm

logger = logging.getLogger("QbdMix")


class PinPolicy(str, Enum):
    DIAGONAL_MFPT = "diagonal_mfpt"
    ORACLE_DIAGONAL = "oracle_diagonal"
    RETURN_IDENTITY = "return_identity"
    RAW_FREE = "raw_free"


# ————————————————————————————————
# 1. GENERALIZED INVERSES OF I - U0
# ————————————————————————————————
@dataclass(frozen=True, eq=False)
class GeneralizedInverseSpec:
    """
    Parameters of V = [I - U0 + t u]^-1 + e f + h v0.

    Requires v0 t != 0 and u e != 0.
    """
    v0: np.ndarray
    t: np.ndarray
    u: np.ndarray
    f: np.ndarray
    h: np.ndarray

    def __post_init__(self) -> None:
        for name in ("v0", "t", "u", "f", "h"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        m = self.v0.size
        if any(getattr(self, n).size != m for n in ("t", "u", "f", "h")):
            raise ValueError(f"generalized inverse vectors must all have length {m}")
        if abs(self.v0 @ self.t) <= 1e-12:
            raise ValueError("generalized inverse needs v0 t != 0")
        if abs(self.u.sum()) <= 1e-12:
            raise ValueError("generalized inverse needs u e != 0")

    @classmethod
    def fundamental(cls, v0: np.ndarray) -> "GeneralizedInverseSpec":
        """t = e, u = v0, f = h = 0, which yields Z."""
        v0 = np.asarray(v0, dtype=float).reshape(-1)
        zero = np.zeros_like(v0)
        return cls(v0, np.ones_like(v0), v0, zero, zero)


def generalized_inverse(U0: np.ndarray, spec: GeneralizedInverseSpec) -> np.ndarray:
    """V with (I - U0) V (I - U0) = I - U0."""
    U0 = np.asarray(U0, dtype=float)
    m = U0.shape[0]
    core = np.eye(m) - U0 + np.outer(spec.t, spec.u)
    if np.linalg.cond(core) > 1e13:
        raise NumericError("I - U0 + t u is numerically singular", 0)
    e = np.ones(m)
    return np.linalg.inv(core) + np.outer(e, spec.f) + np.outer(spec.h, spec.v0)


@dataclass(frozen=True)
class CensoredFreedom:
    """General censored solution X0 + e c with one free constant per column."""
    columns: int

    def general(self, X0: np.ndarray, c: np.ndarray) -> np.ndarray:
        X0 = np.asarray(X0, dtype=float)
        if X0.ndim == 1:
            return X0 + float(np.asarray(c).reshape(-1)[0])
        return X0 + np.ones((X0.shape[0], 1)) @ np.asarray(c, dtype=float).reshape(1, -1)


def solve_censored(U0: np.ndarray, G0: np.ndarray, Z: Optional[np.ndarray] = None,
                   v0: Optional[np.ndarray] = None, tol: float = 1e-9) -> Tuple[np.ndarray, CensoredFreedom]:
    """
    Particular solution of (I - U0) X0 = G0 through the fundamental matrix.

    Args:
        U0: Censored level-0 chain.
        G0: Right side, one column or m0-row matrix. Each column must satisfy v0 g = 0.
        Z, v0: Precomputed fundamental matrix and stationary vector, if available.
        tol: Solvability tolerance, relative to 1 + max|G0|.

    Returns:
        (Z G0, freedom)
    """
    U0 = np.asarray(U0, dtype=float)
    G0 = np.asarray(G0, dtype=float)
    if v0 is None:
        v0 = censored_stationary(U0)
    if Z is None:
        Z = generalized_inverse(U0, GeneralizedInverseSpec.fundamental(v0))
    defect = float(np.max(np.abs(v0 @ G0))) if G0.size else 0.0
    if defect > tol * (1.0 + max_norm(G0)):
        raise InconsistentSystemError(defect)
    columns = 1 if G0.ndim == 1 else G0.shape[1]
    return Z @ G0, CensoredFreedom(columns)


def solve_censored_generalized(U0: np.ndarray, g: np.ndarray, spec: GeneralizedInverseSpec,
                               theta: Optional[np.ndarray] = None) -> np.ndarray:
    """Member x = V g + [I - V(I - U0)] theta of the full solution family."""
    U0 = np.asarray(U0, dtype=float)
    g = np.asarray(g, dtype=float)
    V = generalized_inverse(U0, spec)
    x = V @ g
    if theta is not None:
        x = x + (np.eye(U0.shape[0]) - V @ (np.eye(U0.shape[0]) - U0)) @ np.asarray(theta, dtype=float)
    return x


# ————————————————————————————————
# 2. MATRIX POISSON PROCEDURE
# ————————————————————————————————
class MatrixPoissonSolver:
    """
    Rows of the solution of (I - P) A = B, extended on demand and cached.

    With c0 = 0 the rows are the particular solution; the carrier rows
    w_i = Y_i^(i) e carry a level-0 constant, so A_i(c0) = A_i(0) + w_i c0.
    Set `reduced=True` when the source already yields rows of (I - R_U)^-1 B.
    """

    def __init__(self, f: RgFactorization, source: BlockRowSource, eps_tail: float = 1e-12,
                 reduced: bool = False, cap: int = 10_000):
        self.f = f
        self.source = source
        self.eps_tail = eps_tail
        self.reduced = reduced
        self.cap = cap
        self.width = sum(source.col_phases)
        self.horizon = 0
        self.horizon_tail_norm = 0.0
        self._c: Dict[int, np.ndarray] = {}
        self._rows: List[np.ndarray] = []
        self._carrier: List[np.ndarray] = []
        self._lock = RLock()

    def reduced_row(self, i: int) -> np.ndarray:
        """C_i = B_i + sum_k X_k^(i) B_{i+k}."""
        with self._lock:
            if i not in self._c:
                if self.source(i) is None:
                    self._c[i] = np.zeros((self.f.phases(i), self.width))
                elif self.reduced:
                    self._c[i] = np.asarray(self.source(i), dtype=float)
                else:
                    row, h, tail = ru_row(self.f, self.source, i, self.eps_tail, self.cap)
                    self.horizon = max(self.horizon, h)
                    self.horizon_tail_norm = max(self.horizon_tail_norm, tail)
                    self._c[i] = row
            return self._c[i]

    def _extend(self, i: int) -> None:
        f = self.f
        while len(self._rows) <= i:
            k = len(self._rows)
            c = self.reduced_row(k)
            if k == 0:
                x, _ = solve_censored(f.U_seq[0], c, Z=f.Z, v0=f.v0)
                self._rows.append(x)
                self._carrier.append(np.ones(f.phases(0)))
            else:
                g = f.g_block(k)
                self._rows.append(f.solve_i_minus_u(k, c) + g @ self._rows[-1])
                self._carrier.append(g @ self._carrier[-1])

    def particular_row(self, i: int) -> np.ndarray:
        with self._lock:
            self._extend(i)
            return self._rows[i]

    def carrier(self, i: int) -> np.ndarray:
        with self._lock:
            self._extend(i)
            return self._carrier[i]

    def row(self, i: int, constants: Optional[np.ndarray] = None) -> np.ndarray:
        base = self.particular_row(i)
        if constants is None:
            return base
        return base + np.outer(self.carrier(i), constants)

    def window(self, I_max: int, constants: Optional[np.ndarray] = None) -> BlockMatrixWindow:
        rows = [self.row(i, constants) for i in range(I_max + 1)]
        return BlockMatrixWindow.from_rows(rows, self.source.col_phases, self.horizon, self.horizon_tail_norm)

    def pin_constants(self, targets: np.ndarray) -> np.ndarray:
        """c0 such that every column's diagonal entry equals its target."""
        targets = np.asarray(targets, dtype=float).reshape(-1)
        if targets.size != self.width:
            raise ValueError(f"need {self.width} diagonal targets, got {targets.size}")
        c0 = np.empty(self.width)
        col = 0
        for k, m in enumerate(self.source.col_phases):
            base, w = self.particular_row(k), self.carrier(k)
            for j in range(m):
                c0[col] = (targets[col] - base[j, col]) / w[j]
                col += 1
        logger.debug(f"Pinned {self.width} column constant(s)")
        return c0


@dataclass(frozen=True, eq=False)
class PoissonSolution:
    """The A window with constants c0 applied, and the solver that can extend it."""
    pinned: BlockMatrixWindow
    constants: np.ndarray
    pin_policy: PinPolicy
    balance_defect: float = float("nan")
    solver: Optional[MatrixPoissonSolver] = field(default=None, repr=False)

    def with_constants(self, constants: np.ndarray) -> BlockMatrixWindow:
        if self.solver is None:
            raise ValueError("solution carries no solver")
        return self.solver.window(self.pinned.I_max, constants)

    @property
    def free(self) -> BlockMatrixWindow:
        """The particular solution, c0 = 0."""
        return self.with_constants(np.zeros(self.constants.size))



def _as_source(B: Union[BlockMatrixWindow, BlockRowSource]) -> BlockRowSource:
    return BlockRowSource.from_window(B) if isinstance(B, BlockMatrixWindow) else B


def balance_defect(B: Union[BlockMatrixWindow, BlockRowSource], stationary: StationaryWindow) -> float:
    """Relative size of sum_k pi_k B_k over the stationary window."""
    source = _as_source(B)
    total = np.zeros(sum(source.col_phases))
    scale = 0.0
    for k in range(stationary.J + 1):
        b = source(k)
        if b is None:
            break
        total += stationary.block(k) @ b
        scale = max(scale, max_norm(b))
    return max_norm(total) / (1.0 + scale)


def solve_matrix_poisson(model: QbdModel, f: RgFactorization, B: Union[BlockMatrixWindow, BlockRowSource],
                         pin: PinPolicy = PinPolicy.RAW_FREE, window: Optional[Tuple[int, int]] = None,
                         eps_tail: float = 1e-12, diagonal_targets: Optional[np.ndarray] = None,
                         constants: Optional[np.ndarray] = None,
                         stationary: Optional[StationaryWindow] = None,
                         reduced: bool = False) -> PoissonSolution:
    """
    Solve (I - P) A = B on block rows 0..I_max.

    Args:
        B: Right side with pi B = 0; its columns are the solution columns.
        pin: raw_free keeps `constants` (zero by default); every other policy
            fixes c0 from `diagonal_targets`, one value per column state.
        window: (I_max, J_max); J_max must match the column levels of B.
        stationary: When given, pi B is spot-checked on its window.

    Returns:
        PoissonSolution
    """
    pin = PinPolicy(pin)
    source = _as_source(B)
    J_cols = len(source.col_phases) - 1
    I_max, J_max = window if window is not None else (B.I_max if isinstance(B, BlockMatrixWindow) else J_cols, J_cols)
    if J_max != J_cols:
        raise ValueError(f"window J_max={J_max} does not match the {J_cols + 1} column levels of B")

    defect = float("nan")
    if stationary is not None and not reduced:
        defect = balance_defect(source, stationary)
        if defect > 1e-6:
            logger.warning(f"pi B deviates from 0 by {defect:.3e} on the stationary window")

    solver = MatrixPoissonSolver(f, source, eps_tail, reduced=reduced)
    if pin is PinPolicy.RAW_FREE:
        c0 = np.zeros(solver.width) if constants is None else np.asarray(constants, dtype=float).reshape(-1)
    else:
        if diagonal_targets is None:
            raise ValueError(f"pin policy {pin.value} needs diagonal targets")
        c0 = solver.pin_constants(diagonal_targets)
    return PoissonSolution(solver.window(I_max, c0), c0, pin, defect, solver)


def poisson_residual(model: QbdModel, A: BlockMatrixWindow, B: Union[BlockMatrixWindow, BlockRowSource]) -> float:
    """Max-norm of (I - P) A - B over block rows 0..I_max-1."""
    source = _as_source(B)
    worst = 0.0
    for i in range(A.I_max):
        lhs = A.row(i) - model.local(i) @ A.row(i) - model.up(i) @ A.row(i + 1)
        if i >= 1:
            lhs = lhs - model.down(i) @ A.row(i - 1)
        b = source(i)
        b = np.zeros_like(lhs) if b is None else b
        worst = max(worst, max_norm(lhs - b[:, :lhs.shape[1]]))
    return worst
