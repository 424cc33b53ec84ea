"""
R-, G- and U-measures of a level-dependent QBD and the UL-type RG-factorization

    I - P = (I - R_U)(I - Psi_D)(I - G_L)

R_U carries R_l on the block superdiagonal, Psi_D carries U_l on the diagonal and
G_L carries G_k on the subdiagonal. The infinite operators (I - R_U)^-1 and
(I - G_L)^-1 are applied to finite windows by `apply_ru_inverse` and
`apply_gl_inverse`.
"""
from __future__ import annotations
from collections import OrderedDict
from dataclasses import dataclass, field
from threading import RLock
from typing import Callable, Dict, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd
from scipy.linalg import lu_factor, lu_solve

from QbdMix.errors import NonConvergenceError, NotRecurrentError, NumericError
from QbdMix.model import BoundaryPolicy, QbdModel, _assemble
from QbdMix.stationary import censored_stationary
from QbdMix.utils import is_strongly_connected, max_norm, right_solve, spectral_radius

logger = logging.getLogger("QbdMix")

_COND_LIMIT = 1e13


# ————————————————————————————————
# 1. WINDOWS AND ROW SOURCES
# ————————————————————————————————
@dataclass(frozen=True, eq=False)
class BlockMatrixWindow:
    """
    Levels 0..I_max by 0..J_max of an infinite block matrix, stored densely.

    `horizon` is the largest series cutoff used to build any row and
    `horizon_tail_norm` the largest first omitted term.
    """
    row_phases: Tuple[int, ...]
    col_phases: Tuple[int, ...]
    data: np.ndarray
    horizon: int = 0
    horizon_tail_norm: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "row_phases", tuple(int(m) for m in self.row_phases))
        object.__setattr__(self, "col_phases", tuple(int(m) for m in self.col_phases))
        data = np.array(self.data, dtype=float)
        if data.shape != (sum(self.row_phases), sum(self.col_phases)):
            raise ValueError(f"window data {data.shape} does not match phases "
                             f"{sum(self.row_phases)}x{sum(self.col_phases)}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "_row_off", np.concatenate([[0], np.cumsum(self.row_phases)]).astype(int))
        object.__setattr__(self, "_col_off", np.concatenate([[0], np.cumsum(self.col_phases)]).astype(int))

    @classmethod
    def from_rows(cls, rows: Sequence[np.ndarray], col_phases: Sequence[int],
                  horizon: int = 0, horizon_tail_norm: float = 0.0) -> "BlockMatrixWindow":
        width = sum(col_phases)
        data = np.vstack([r.reshape(r.shape[0], width) for r in rows]) if rows else np.zeros((0, width))
        return cls(tuple(r.shape[0] for r in rows), tuple(col_phases), data, horizon, horizon_tail_norm)

    @classmethod
    def identity(cls, phases: Sequence[int]) -> "BlockMatrixWindow":
        n = sum(phases)
        return cls(tuple(phases), tuple(phases), np.eye(n))

    @property
    def I_max(self) -> int:
        return len(self.row_phases) - 1

    @property
    def J_max(self) -> int:
        return len(self.col_phases) - 1

    def block(self, i: int, j: int) -> np.ndarray:
        return self.data[self._row_off[i]:self._row_off[i + 1], self._col_off[j]:self._col_off[j + 1]]

    def row(self, i: int) -> np.ndarray:
        return self.data[self._row_off[i]:self._row_off[i + 1]]

    def column_states(self):
        return [(k, j) for k, m in enumerate(self.col_phases) for j in range(m)]

    def row_states(self):
        return [(k, j) for k, m in enumerate(self.row_phases) for j in range(m)]

    def diagonal(self) -> np.ndarray:
        """Entries at (state, same state) for every column state with a row in the window."""
        out = np.full(self.data.shape[1], np.nan)
        for c, (k, j) in enumerate(self.column_states()):
            if k <= self.I_max and j < self.row_phases[k]:
                out[c] = self.data[self._row_off[k] + j, c]
        return out

    def restrict(self, I_max: int, J_max: int) -> "BlockMatrixWindow":
        return BlockMatrixWindow(
            self.row_phases[:I_max + 1], self.col_phases[:J_max + 1],
            self.data[:self._row_off[I_max + 1], :self._col_off[J_max + 1]],
            self.horizon, self.horizon_tail_norm,
        )

    def scale_columns(self, weights: np.ndarray) -> "BlockMatrixWindow":
        return BlockMatrixWindow(self.row_phases, self.col_phases, self.data * weights[None, :],
                                 self.horizon, self.horizon_tail_norm)

    def to_frame(self) -> pd.DataFrame:
        rows, cols = self.row_states(), self.column_states()
        li, pi = zip(*rows) if rows else ((), ())
        lj, pj = zip(*cols) if cols else ((), ())
        n_r, n_c = len(rows), len(cols)
        return pd.DataFrame({
            "level_i": np.repeat(li, n_c),
            "phase_i": np.repeat(pi, n_c),
            "level_j": np.tile(lj, n_r),
            "phase_j": np.tile(pj, n_r),
            "value": self.data.reshape(-1),
        })

    def dict(self) -> dict:
        return {
            "row_levels": [0, self.I_max], "col_levels": [0, self.J_max],
            "blocks": [[self.block(i, j).tolist() for j in range(self.J_max + 1)] for i in range(self.I_max + 1)],
            "horizon": self.horizon, "horizon_tail_norm": self.horizon_tail_norm,
        }


@dataclass(frozen=True, eq=False)
class BlockRowSource:
    """
    Lazily generated block rows B_i (None past a finite support).

    At most `max_rows` rows are cached; the least recently used row is evicted
    and recomputed on its next request.
    """
    col_phases: Tuple[int, ...]
    row_fn: Callable[[int], Optional[np.ndarray]]
    max_rows: int = 4096
    _cache: "OrderedDict[int, Optional[np.ndarray]]" = field(default_factory=OrderedDict, repr=False)
    _lock: RLock = field(default_factory=RLock, repr=False)

    def __call__(self, i: int) -> Optional[np.ndarray]:
        with self._lock:
            if i in self._cache:
                self._cache.move_to_end(i)
                return self._cache[i]
            row = self.row_fn(i)
            self._cache[i] = row
            if len(self._cache) > self.max_rows:
                self._cache.popitem(last=False)
            return row

    @property
    def cached_rows(self) -> int:
        return len(self._cache)

    @classmethod
    def from_window(cls, w: BlockMatrixWindow) -> "BlockRowSource":
        return cls(w.col_phases, lambda i: w.row(i) if i <= w.I_max else None)


# ————————————————————————————————
# 2. FACTORIZATION RECORD
# ————————————————————————————————
@dataclass(frozen=True, eq=False)
class RgFactorization:
    phase_sizes: Tuple[int, ...]
    n_star: int
    R_seq: Tuple[np.ndarray, ...]      # R_0 .. R_{N*-1}
    R_tail: np.ndarray
    G_seq: Tuple[np.ndarray, ...]      # G_1 .. G_{N*}
    G_tail: np.ndarray
    U_seq: Tuple[np.ndarray, ...]      # U_0 .. U_{N*}
    U_tail: np.ndarray
    Z: np.ndarray
    v0: np.ndarray
    tail_spectral_radius: float
    tol: float
    iterations: Dict[str, int]
    u_form_gap: float = 0.0
    _lu: Dict[object, tuple] = field(default_factory=dict, init=False, repr=False)
    _lu_lock: RLock = field(default_factory=RLock, init=False, repr=False)

    def phases(self, k: int) -> int:
        return self.phase_sizes[min(k, self.n_star)]

    def r_block(self, l: int) -> np.ndarray:
        return self.R_seq[l] if l < self.n_star else self.R_tail

    def g_block(self, k: int) -> np.ndarray:
        if k < 1:
            raise ValueError("G is defined for levels >= 1")
        return self.G_seq[k - 1] if k <= self.n_star else self.G_tail

    def u_block(self, l: int) -> np.ndarray:
        return self.U_seq[l] if l <= self.n_star else self.U_tail

    def solve_i_minus_u(self, k: int, rhs: np.ndarray) -> np.ndarray:
        """(I - U_k)^-1 rhs for k >= 1, with one cached LU per distinct level."""
        if k < 1:
            raise ValueError("I - U_0 is singular; use Z for level 0")
        key = k if k <= self.n_star else "tail"
        with self._lu_lock:
            if key not in self._lu:
                a = np.eye(self.phases(k)) - self.u_block(k)
                if np.linalg.cond(a) > _COND_LIMIT:
                    raise NumericError("I - U_k is numerically singular", k)
                self._lu[key] = lu_factor(a)
            factor = self._lu[key]
        return lu_solve(factor, rhs)

    def summary(self) -> dict:
        return {
            "n_star": self.n_star,
            "phase_sizes": list(self.phase_sizes),
            "tail_spectral_radius": self.tail_spectral_radius,
            "R": [r.tolist() for r in self.R_seq] + [self.R_tail.tolist()],
            "G": [g.tolist() for g in self.G_seq] + [self.G_tail.tolist()],
            "U": [u.tolist() for u in self.U_seq] + [self.U_tail.tolist()],
            "Z": self.Z.tolist(),
            "v0": self.v0.tolist(),
            "tol": self.tol,
            "iterations": dict(self.iterations),
            "u_form_gap": self.u_form_gap,
        }


# ————————————————————————————————
# 3. TAIL R AND G
# ————————————————————————————————
def _g_residual(A2, A1, A0, G) -> float:
    return max_norm(A0 @ G @ G + A1 @ G + A2 - G)


def _r_residual(A2, A1, A0, R) -> float:
    return max_norm(A0 + R @ A1 + R @ R @ A2 - R)


def _logarithmic_reduction(A2, A1, A0, tol: float, max_sweeps: int) -> Tuple[np.ndarray, int, float]:
    I = np.eye(A1.shape[0])
    up = np.linalg.solve(I - A1, A0)
    down = np.linalg.solve(I - A1, A2)
    G, T = down.copy(), up.copy()
    res = _g_residual(A2, A1, A0, G)
    sweep = 0
    while res > tol and sweep < max_sweeps:
        sweep += 1
        mix = up @ down + down @ up
        up = np.linalg.solve(I - mix, up @ up)
        down = np.linalg.solve(I - mix, down @ down)
        G = G + T @ down
        T = T @ up
        res = _g_residual(A2, A1, A0, G)
        logger.debug(f"LR sweep {sweep}: G residual {res:.3e}")
    return G, sweep, res


def _fixed_point(A2, A1, A0, tol: float, max_iters: int) -> Tuple[np.ndarray, int, float]:
    I = np.eye(A1.shape[0])
    G = np.zeros_like(A1)
    step = np.inf
    for it in range(1, max_iters + 1):
        G_next = np.linalg.solve(I - A1 - A0 @ G, A2)
        step = max_norm(G_next - G)
        G = G_next
        if step <= tol * 1e-2:
            return G, it, _g_residual(A2, A1, A0, G)
    return G, max_iters, _g_residual(A2, A1, A0, G)


def _tail_rg(A2, A1, A0, tol: float = 1e-12, max_sweeps: int = 64, max_iters: int = 1_000_000,
             recurrence_margin: float = 1e-6) -> Tuple[np.ndarray, np.ndarray, Dict[str, int]]:
    A2, A1, A0 = (np.asarray(a, dtype=float) for a in (A2, A1, A0))
    try:
        G, count, res = _logarithmic_reduction(A2, A1, A0, tol, max_sweeps)
        method = "logarithmic_reduction"
    except np.linalg.LinAlgError:
        res, count = np.inf, max_sweeps
    if not res <= tol:
        logger.info(f"Logarithmic reduction stalled at {res:.3e}; falling back to fixed-point iteration")
        G, count, res = _fixed_point(A2, A1, A0, tol, max_iters)
        method = "fixed_point"
        if not res <= tol:
            raise NonConvergenceError("tail G did not converge", res, count)
    I = np.eye(A1.shape[0])
    R = right_solve(A0, I - A1 - A0 @ G)
    radius = spectral_radius(R)
    if radius >= 1.0 - recurrence_margin:
        raise NotRecurrentError(radius)
    r_res = _r_residual(A2, A1, A0, R)
    if r_res > tol:
        raise NonConvergenceError("tail R residual above tolerance", r_res, count)
    logger.debug(f"Tail solved by {method} in {count} step(s); sp(R)={radius:.6f}")
    return R, G, {"tail": count, "tail_method_fallback": int(method == "fixed_point")}


def solve_tail_rg(A2, A1, A0, tol: float = 1e-12, max_sweeps: int = 64,
                  max_iters: int = 1_000_000, recurrence_margin: float = 1e-6) -> Tuple[np.ndarray, np.ndarray]:
    """
    Minimal nonnegative solutions of the level-independent equations

        R = A0 + R A1 + R^2 A2        G = A0 G^2 + A1 G + A2

    Args:
        A2, A1, A0: Tail down/local/up blocks.
        tol: Max-norm residual target.

    Returns:
        (R, G)

    Raises:
        NotRecurrentError: sp(R) >= 1 - recurrence_margin.
        NonConvergenceError: neither reduction nor fixed-point iteration reached tol.
    """
    R, G, _ = _tail_rg(A2, A1, A0, tol, max_sweeps, max_iters, recurrence_margin)
    return R, G


def measure_residuals(model: QbdModel, f: "RgFactorization") -> Dict[str, float]:
    """Max-norm residuals of the level-dependent R and G equations, levels 0..N*+1."""
    tail = model.tail_blocks
    r_worst, g_worst = 0.0, 0.0
    for l in range(model.n_star + 2):
        R, R_next = f.r_block(l), f.r_block(l + 1)
        r_worst = max(r_worst, max_norm(model.up(l) + R @ model.local(l + 1)
                                        + R @ R_next @ model.down(l + 2) - R))
        if l >= 1:
            G, G_next = f.g_block(l), f.g_block(l + 1)
            g_worst = max(g_worst, max_norm(model.down(l) + model.local(l) @ G
                                            + model.up(l) @ G_next @ G - G))
    return {
        "R_levels": r_worst,
        "G_levels": g_worst,
        "R_tail": _r_residual(tail.A2, tail.A1, tail.A0, f.R_tail),
        "G_tail": _g_residual(tail.A2, tail.A1, tail.A0, f.G_tail),
    }


# ————————————————————————————————
# 4. LEVEL-DEPENDENT MEASURES
# ————————————————————————————————
def _resolvent(a: np.ndarray, level: int) -> np.ndarray:
    if np.linalg.cond(a) > _COND_LIMIT:
        raise NumericError("singular resolvent in backward recursion", level)
    return a


def solve_level_dependent(model: QbdModel, tol: float = 1e-12, **tail_options) -> RgFactorization:
    """Backward recursions for R_l, G_k from the tail solution, then U_l, v0 and Z."""
    n_star = model.n_star
    tail = model.tail_blocks
    R_tail, G_tail, iterations = _tail_rg(tail.A2, tail.A1, tail.A0, tol, **tail_options)

    R_seq = [None] * n_star
    nxt = R_tail
    for l in range(n_star - 1, -1, -1):
        m1 = model.phases(l + 1)
        a = _resolvent(np.eye(m1) - model.local(l + 1) - nxt @ model.down(l + 2), l)
        R_seq[l] = right_solve(model.up(l), a)
        nxt = R_seq[l]

    G_seq = [None] * n_star
    nxt = G_tail
    for k in range(n_star, 0, -1):
        a = _resolvent(np.eye(model.phases(k)) - model.local(k) - model.up(k) @ nxt, k)
        G_seq[k - 1] = np.linalg.solve(a, model.down(k))
        nxt = G_seq[k - 1]

    def g_at(k):
        return G_seq[k - 1] if k <= n_star else G_tail

    U_seq, gap = [], 0.0
    for l in range(n_star + 1):
        r_l = R_seq[l] if l < n_star else R_tail
        u_r = model.local(l) + r_l @ model.down(l + 1)
        u_g = model.local(l) + model.up(l) @ g_at(l + 1)
        gap = max(gap, max_norm(u_r - u_g))
        U_seq.append(u_r)
    U_tail = tail.A1 + R_tail @ tail.A2
    if gap > 1e-8:
        logger.warning(f"U-measure forms disagree by {gap:.3e}")

    U0 = U_seq[0]
    if not is_strongly_connected(U0):
        raise NumericError("censored chain U0 is not irreducible", 0)
    sv = np.linalg.svd(np.eye(U0.shape[0]) - U0, compute_uv=False)
    if sv[-1] > 1e-8:
        raise NumericError(f"I - U0 is not singular (smallest singular value {sv[-1]:.3e})", 0)
    if sv.size > 1 and sv[-2] <= 1e-10:
        raise NumericError(f"I - U0 has a degenerate null space ({sv[-2]:.3e})", 0)
    v0 = censored_stationary(U0)
    e = np.ones((U0.shape[0], 1))
    Z = np.linalg.inv(np.eye(U0.shape[0]) - U0 + e @ v0[None, :])

    for l in range(n_star):
        iterations[f"R_{l}"] = 1
    for k in range(1, n_star + 1):
        iterations[f"G_{k}"] = 1

    f = RgFactorization(
        phase_sizes=model.phase_sizes, n_star=n_star,
        R_seq=tuple(R_seq), R_tail=R_tail, G_seq=tuple(G_seq), G_tail=G_tail,
        U_seq=tuple(U_seq), U_tail=U_tail, Z=Z, v0=v0,
        tail_spectral_radius=spectral_radius(R_tail), tol=tol,
        iterations=iterations, u_form_gap=gap,
    )
    logger.info(f"Factorized '{model.name}': N*={n_star}, sp(R)={f.tail_spectral_radius:.6f}, "
                f"tail steps={iterations['tail']}")
    return f


# ————————————————————————————————
# 5. PRODUCTS AND TRIANGULAR INVERSES
# ————————————————————————————————
def x_product(f: RgFactorization, l: int, k: int) -> np.ndarray:
    """R_l R_{l+1} ... R_{l+k-1}."""
    if k < 1:
        raise ValueError(f"x_product needs k >= 1, got {k}")
    out = f.r_block(l)
    for step in range(1, k):
        out = out @ f.r_block(l + step)
    return out


def y_product(f: RgFactorization, l: int, k: int) -> np.ndarray:
    """G_l G_{l-1} ... G_{l-k+1}."""
    if not 1 <= k <= l:
        raise ValueError(f"y_product needs 1 <= k <= l, got l={l}, k={k}")
    out = f.g_block(l)
    for step in range(1, k):
        out = out @ f.g_block(l - step)
    return out


def ru_row(f: RgFactorization, source: BlockRowSource, i: int, eps_tail: float = 1e-12,
           cap: int = 10_000) -> Tuple[np.ndarray, int, float]:
    """
    Row i of (I - R_U)^-1 B, i.e. B_i + sum_k X_k^(i) B_{i+k}.

    Stops at the first k with |X_k|*max(1, |B_{i+k}|) < eps_tail, or when the
    source runs out of rows. Returns (row, horizon, first omitted term norm).
    """
    first = source(i)
    if first is None:
        raise ValueError(f"row source has no row {i}")
    acc = np.array(first, dtype=float, copy=True)
    X = np.eye(f.phases(i))
    for k in range(1, cap + 1):
        X = X @ f.r_block(i + k - 1)
        b = source(i + k)
        if b is None:
            return acc, k, 0.0
        term_norm = max_norm(X) * max(1.0, max_norm(b))
        if term_norm < eps_tail:
            return acc, k, term_norm
        acc += X @ b
    raise NonConvergenceError(f"R-series of row {i} still above eps_tail at horizon cap", term_norm, cap)


def apply_ru_inverse(f: RgFactorization, B: Union[BlockMatrixWindow, BlockRowSource],
                     eps_tail: float = 1e-12, levels: Optional[int] = None,
                     cap: int = 10_000) -> BlockMatrixWindow:
    """Window of (I - R_U)^-1 B on block rows 0..levels."""
    if isinstance(B, BlockMatrixWindow):
        if levels is None:
            levels = B.I_max
        B = BlockRowSource.from_window(B)
    elif levels is None:
        raise ValueError("levels is required for a generated row source")
    rows, horizon, tail = [], 0, 0.0
    for i in range(levels + 1):
        row, h, t = ru_row(f, B, i, eps_tail, cap)
        rows.append(row)
        horizon, tail = max(horizon, h), max(tail, t)
    logger.debug(f"(I-R_U)^-1 applied on {levels + 1} rows: horizon {horizon}, tail {tail:.2e}")
    return BlockMatrixWindow.from_rows(rows, B.col_phases, horizon, tail)


def apply_gl_inverse(f: RgFactorization, X: BlockMatrixWindow) -> BlockMatrixWindow:
    """
    Window of (I - G_L)^-1 X. Row i is X_i + sum_{k=1..i} Y_k^(i) X_{i-k},
    evaluated through the equivalent recursion A_i = X_i + G_i A_{i-1}.
    """
    rows = [np.array(X.row(0))]
    for i in range(1, X.I_max + 1):
        rows.append(X.row(i) + f.g_block(i) @ rows[-1])
    return BlockMatrixWindow.from_rows(rows, X.col_phases, X.horizon, X.horizon_tail_norm)


def rg_residual(model: QbdModel, f: RgFactorization, window: int) -> float:
    """Max-norm of (I-R_U)(I-Psi_D)(I-G_L) - (I-P) over block rows 0..window-2."""
    if window < model.n_star + 2:
        raise ValueError(f"window must be >= N* + 2 = {model.n_star + 2}")
    off = model.offsets(window)
    n = off[-1]
    RU, PSI, GL = np.zeros((n, n)), np.zeros((n, n)), np.zeros((n, n))
    for l in range(window + 1):
        here = slice(off[l], off[l + 1])
        PSI[here, here] = f.u_block(l)
        if l < window:
            RU[here, off[l + 1]:off[l + 2]] = f.r_block(l)
        if l >= 1:
            GL[here, off[l - 1]:off[l]] = f.g_block(l)
    I = np.eye(n)
    product = (I - RU) @ (I - PSI) @ (I - GL)
    P, _ = _assemble(model, window, BoundaryPolicy.REFLECT_TO_A1)
    interior = slice(0, off[window - 1])
    return max_norm(product[interior] - (I - P)[interior])
