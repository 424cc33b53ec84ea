"""
Mean and variance of first-passage and mixing times of a QBD.

Mixing time here is the hitting time of a target drawn from pi. Every block
matrix is produced on a finite window (levels 0..I_max by 0..J_max) by the
matrix Poisson procedure. Sums that run over all columns, such as eta = M pi^T,
are reported as partial sums with a divergence flag.

Row builders, with s_i = sum_{k>=0} X_k^(i) e and D_j = diag(pi_j)^-1:

    first passage   F_{i,j} = s_i 1^T - K_{i,j} D_j
    mixing matrix   H_{i,j} = s_i pi_j - K_{i,j}

where K_{i,j} is X_{j-i}^(i) above the diagonal, U_i on it, A2^(i) just below
it and zero elsewhere. The second-moment right side is E + Gamma with

    Gamma_{i,j} = 2 (P M)_{i,j} - P_{i,j} D_j [I + 2 (pi M)_j]
"""
from __future__ import annotations
from dataclasses import dataclass, field
from threading import RLock
from typing import Dict, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from QbdMix.errors import NonConvergenceError, NumericError
from QbdMix.factorization import BlockMatrixWindow, BlockRowSource, RgFactorization, ru_row
from QbdMix.model import DenseChain, QbdModel, truncate_dense
from QbdMix.oracle.dense import (
    dense_mfpt, dense_passage_moments, dense_second_moments, dense_stationary, fundamental_matrix,
)
from QbdMix.poisson import PinPolicy, PoissonSolution, solve_matrix_poisson
from QbdMix.stationary import StationaryWindow, stationary_window_covering
from QbdMix.utils import max_norm

logger = logging.getLogger("QbdMix")

PiLike = Union[StationaryWindow, np.ndarray, Sequence[float]]

DIVERGENCE_GROWTH = 0.01
STATIONARY_TAIL = 1e-10


# ————————————————————————————————
# 1. RESULT RECORDS
# ————————————————————————————————
@dataclass(frozen=True, eq=False)
class EtaPartial:
    eta: np.ndarray
    tau_partial: float
    divergence_flag: bool
    growth: float

    def dict(self) -> dict:
        return {"eta": self.eta.tolist(), "tau_partial": self.tau_partial,
                "divergence_flag": self.divergence_flag, "last_column_growth": self.growth}


@dataclass(frozen=True, eq=False)
class VarianceReport:
    L2: BlockMatrixWindow
    eta2: np.ndarray
    V2: np.ndarray
    v2_stationary: float
    divergence_flag: bool
    w_route_gap: Optional[float] = None

    def dict(self) -> dict:
        return {"L2": self.L2.dict(), "eta2": self.eta2.tolist(), "V2": self.V2.tolist(),
                "v2_stationary": self.v2_stationary, "divergence_flag": self.divergence_flag,
                "w_route_gap": self.w_route_gap}


@dataclass(frozen=True, eq=False)
class MixingReport:
    M: BlockMatrixWindow
    L: BlockMatrixWindow
    eta: np.ndarray
    tau_partial: float
    divergence_flag: bool
    kemeny_censored: float
    kemeny_censored_2x2: Optional[float] = None
    M2: Optional[BlockMatrixWindow] = None
    L2: Optional[BlockMatrixWindow] = None
    eta2: Optional[np.ndarray] = None
    V2: Optional[np.ndarray] = None
    v2_stationary: Optional[float] = None
    kemeny_pairs: Optional[dict] = None
    route_gaps: Dict[str, float] = field(default_factory=dict)

    def dict(self) -> dict:
        out = {
            "M": self.M.dict(), "L": self.L.dict(), "eta": self.eta.tolist(),
            "tau_partial": self.tau_partial, "divergence_flag": self.divergence_flag,
            "kemeny_censored": self.kemeny_censored, "kemeny_censored_2x2": self.kemeny_censored_2x2,
            "kemeny_pairs": self.kemeny_pairs, "route_gaps": dict(self.route_gaps),
        }
        if self.M2 is not None:
            out.update({"M2": self.M2.dict(), "L2": self.L2.dict(), "eta2": self.eta2.tolist(),
                        "V2": self.V2.tolist(), "v2_stationary": self.v2_stationary})
        return out


# ————————————————————————————————
# 2. WINDOW ARITHMETIC
# ————————————————————————————————
def _flat_pi(pi: PiLike, phases: Sequence[int]) -> np.ndarray:
    n = sum(phases)
    if isinstance(pi, StationaryWindow):
        if len(phases) - 1 > pi.J:
            raise ValueError(f"stationary window covers levels 0..{pi.J}, need 0..{len(phases) - 1}")
        return np.concatenate(pi.pi_blocks[:len(phases)])
    arr = np.asarray(pi, dtype=float).reshape(-1)
    if arr.size < n:
        raise ValueError(f"need {n} stationary entries, got {arr.size}")
    return arr[:n]


def mean_mixing_matrix(M: BlockMatrixWindow, pi: PiLike) -> BlockMatrixWindow:
    """L = M diag(pi), column by column."""
    return M.scale_columns(_flat_pi(pi, M.col_phases))


def eta_vector(M: BlockMatrixWindow, pi: PiLike) -> EtaPartial:
    """
    Partial sums eta = M pi^T over the window columns and tau = pi M e.

    The divergence flag is raised when adding the last column level grows any
    entry of eta by more than 1%.
    """
    w = _flat_pi(pi, M.col_phases)
    eta = M.data @ w
    growth = 0.0
    if M.J_max >= 1:
        cut = sum(M.col_phases[:-1])
        previous = M.data[:, :cut] @ w[:cut]
        growth = float(np.max((eta - previous) / np.maximum(np.abs(previous), 1e-300)))
    flag = growth > DIVERGENCE_GROWTH
    tau = float(_flat_pi(pi, M.row_phases) @ M.data.sum(axis=1))
    if flag:
        logger.warning(f"eta partial sums still growing by {growth:.1%} at J_max={M.J_max}")
    return EtaPartial(eta, tau, flag, growth)


def eta_partial_sums(M: BlockMatrixWindow, pi: PiLike, row: int = 0) -> np.ndarray:
    """Cumulative sum over column levels of pi_j M_{row,j} e, one value per J."""
    w = _flat_pi(pi, M.col_phases)
    terms = M.data[row] * w
    edges = np.cumsum(M.col_phases)
    return np.cumsum(terms)[edges - 1]


# ————————————————————————————————
# 3. KEMENY CONSTANTS
# ————————————————————————————————
def kemeny_censored(f: RgFactorization) -> float:
    """trace(Z) of the censored level-0 chain."""
    return float(np.trace(f.Z))


def _censored_pair(U: np.ndarray, keep: Tuple[int, int]) -> float:
    i, j = keep
    m = U.shape[0]
    if i == j:
        raise ValueError(f"kept states must differ, got {keep}")
    if m < 2 or not (0 <= i < m and 0 <= j < m):
        raise ValueError(f"kept states {keep} not in a {m}-state chain")
    kept = np.array([i, j])
    rest = np.array([k for k in range(m) if k not in keep], dtype=int)
    C = U[np.ix_(kept, kept)]
    if rest.size:
        a = np.eye(rest.size) - U[np.ix_(rest, rest)]
        if np.linalg.cond(a) > 1e13:
            raise NumericError(f"I - P22 is singular when censoring to {keep}", 0)
        C = C + U[np.ix_(kept, rest)] @ np.linalg.solve(a, U[np.ix_(rest, kept)])
    a_, b_ = C[0, 1], C[1, 0]
    if a_ + b_ <= 0:
        raise NumericError(f"censored pair {keep} does not communicate", 0)
    return float(1.0 + 1.0 / (a_ + b_))


def kemeny_censored_2x2(f: RgFactorization, keep: Tuple[int, int] = (0, 1)) -> float:
    """1 + 1/(a + b) of U0 censored onto two kept phases."""
    return _censored_pair(f.U_seq[0], keep)


def kemeny_pair_spread(f: RgFactorization) -> Optional[dict]:
    """The 2x2-censored constant for every kept pair; None when m0 < 2."""
    m = f.phases(0)
    if m < 2:
        return None
    values = {f"{i},{j}": _censored_pair(f.U_seq[0], (i, j)) for i in range(m) for j in range(i + 1, m)}
    lo, hi = min(values.values()), max(values.values())
    if hi - lo > 1e-9:
        logger.warning(f"2x2-censored Kemeny constant depends on the kept pair (spread {hi - lo:.3e})")
    return {"values": values, "min": lo, "max": hi, "spread": hi - lo}


# ————————————————————————————————
# 4. THE ANALYZER
# ————————————————————————————————
class MixingAnalyzer:
    """
    Mixing quantities of one factorized model on one window.

    Everything is computed on first use and cached; rows beyond the window
    (needed by the second-moment right side) are extended lazily.
    """

    def __init__(self, model: QbdModel, f: RgFactorization, window: Tuple[int, int] = (8, 8),
                 eps_tail: float = 1e-12, stationary: Optional[StationaryWindow] = None,
                 oracle_truncation: Optional[int] = None, first_passage: Optional[PoissonSolution] = None):
        self.model = model
        self.f = f
        self._lock = RLock()
        self.I_max, self.J_max = (int(w) for w in window)
        if min(self.I_max, self.J_max) < 0:
            raise ValueError(f"window limits must be >= 0, got {window}")
        self.eps_tail = eps_tail
        self.oracle_truncation = oracle_truncation if oracle_truncation is not None else self.J_max + 25
        self._pi = stationary
        self._col_phases = tuple(model.phases(k) for k in range(self.J_max + 1))
        self._col_off = np.concatenate([[0], np.cumsum(self._col_phases)]).astype(int)
        self._ones = BlockRowSource((1,), lambda k: np.ones((f.phases(k), 1)))
        self._s: Dict[int, np.ndarray] = {}
        self._first: Optional[PoissonSolution] = None
        if first_passage is not None:
            self._check_columns(first_passage)
            self._first = first_passage
        self._col_means: Optional[np.ndarray] = None
        self._second: Dict[PinPolicy, PoissonSolution] = {}
        self._second_source: Optional[BlockRowSource] = None
        self.column_means_horizon = 0

    # ————————————————————————————————
    # STATIONARY SUPPORT
    # ————————————————————————————————
    @property
    def stationary(self) -> StationaryWindow:
        """pi window covering the window levels with tail mass <= STATIONARY_TAIL."""
        with self._lock:
            need = max(self.I_max, self.J_max)
            if self._pi is None or self._pi.J < need or self._pi.tail_mass_bound > STATIONARY_TAIL:
                J = max(need, self._pi.J if self._pi is not None else 0)
                self._pi = stationary_window_covering(self.model, self.f, J, STATIONARY_TAIL, self.eps_tail)
            return self._pi

    def pi_block(self, k: int) -> np.ndarray:
        with self._lock:
            pi = self.stationary
            if k > pi.J:
                self._pi = stationary_window_covering(self.model, self.f, max(k, 2 * pi.J),
                                                      STATIONARY_TAIL, self.eps_tail)
            return self._pi.block(k)

    def column_pi(self) -> np.ndarray:
        return _flat_pi(self.stationary, self._col_phases)

    def column_inverse(self) -> np.ndarray:
        pi = self.stationary
        return np.concatenate([pi.inverse_diagonal(k) for k in range(self.J_max + 1)])

    def column_states(self):
        return [(k, j) for k, m in enumerate(self._col_phases) for j in range(m)]

    def _check_columns(self, sol: PoissonSolution) -> None:
        if tuple(sol.pinned.col_phases) != self._col_phases or sol.pinned.I_max < self.I_max:
            raise ValueError(f"first passage solution does not cover the {self.I_max}x{self.J_max} window")

    # ————————————————————————————————
    # ROW BUILDERS
    # ————————————————————————————————
    def row_weights(self, i: int) -> np.ndarray:
        """s_i = sum_{k>=0} X_k^(i) e."""
        with self._lock:
            if i not in self._s:
                row, _, _ = ru_row(self.f, self._ones, i, self.eps_tail)
                self._s[i] = row[:, 0]
            return self._s[i]

    def _k_blocks(self, i: int) -> Dict[int, np.ndarray]:
        out = {}
        if i >= 1 and i - 1 <= self.J_max:
            out[i - 1] = self.model.down(i)
        if i <= self.J_max:
            out[i] = self.f.u_block(i)
        X = np.eye(self.f.phases(i))
        for j in range(i + 1, self.J_max + 1):
            X = X @ self.f.r_block(j - 1)
            out[j] = X
        return out

    def _col(self, j: int) -> slice:
        return slice(self._col_off[j], self._col_off[j + 1])

    def first_passage_row(self, i: int) -> np.ndarray:
        """F_i over the window columns."""
        d = self.column_inverse()
        row = np.outer(self.row_weights(i), np.ones(d.size))
        for j, K in self._k_blocks(i).items():
            row[:, self._col(j)] -= K * d[self._col(j)][None, :]
        return row

    def mixing_row(self, i: int) -> np.ndarray:
        """H_i over the window columns."""
        row = np.outer(self.row_weights(i), self.column_pi())
        for j, K in self._k_blocks(i).items():
            row[:, self._col(j)] -= K
        return row

    def first_passage_rhs(self) -> BlockRowSource:
        """Unreduced right side E - P diag(pi)^-1."""
        d = self.column_inverse()

        def row(i: int) -> np.ndarray:
            out = np.ones((self.f.phases(i), d.size))
            for j, A in self._neighbours(i):
                out[:, self._col(j)] -= A * d[self._col(j)][None, :]
            return out

        return BlockRowSource(self._col_phases, row)

    def _neighbours(self, i: int):
        blocks = [(i, self.model.local(i)), (i + 1, self.model.up(i))]
        if i >= 1:
            blocks.insert(0, (i - 1, self.model.down(i)))
        return [(j, A) for j, A in blocks if j <= self.J_max]

    # ————————————————————————————————
    # FIRST MOMENTS
    # ————————————————————————————————
    @property
    def first_passage(self) -> PoissonSolution:
        with self._lock:
            if self._first is None:
                source = BlockRowSource(self._col_phases, self.first_passage_row)
                self._first = solve_matrix_poisson(
                    self.model, self.f, source, PinPolicy.DIAGONAL_MFPT, (self.I_max, self.J_max),
                    self.eps_tail, diagonal_targets=self.column_inverse(), reduced=True,
                )
                logger.info(f"Mean first passage window {self.I_max}x{self.J_max} solved")
            return self._first

    @property
    def M(self) -> BlockMatrixWindow:
        return self.first_passage.pinned

    def m_row(self, i: int) -> np.ndarray:
        sol = self.first_passage
        return sol.solver.row(i, sol.constants)

    def mixing_matrix(self, route: str = "product") -> BlockMatrixWindow:
        """L via M diag(pi), or by solving (I - P) L = e pi - P with L's diagonal pinned to 1."""
        if route == "product":
            return mean_mixing_matrix(self.M, self.stationary)
        if route != "poisson":
            raise ValueError("Invalid route. Use: product, poisson")
        source = BlockRowSource(self._col_phases, self.mixing_row)
        return solve_matrix_poisson(
            self.model, self.f, source, PinPolicy.DIAGONAL_MFPT, (self.I_max, self.J_max),
            self.eps_tail, diagonal_targets=np.ones(sum(self._col_phases)), reduced=True,
        ).pinned

    def eta(self) -> EtaPartial:
        return eta_vector(self.M, self.stationary)

    # ————————————————————————————————
    # SECOND MOMENTS
    # ————————————————————————————————
    def column_means(self, cap: int = 10_000) -> np.ndarray:
        """(pi M) over the window columns, summed until pi_i M_i drops below eps_tail."""
        with self._lock:
            if self._col_means is None:
                acc = np.zeros(sum(self._col_phases))
                for i in range(cap):
                    term = self.pi_block(i) @ self.m_row(i)
                    acc += term
                    if i >= self.J_max and max_norm(term) < self.eps_tail:
                        self.column_means_horizon = i + 1
                        break
                else:
                    raise NonConvergenceError("pi M column sums did not settle", max_norm(term), cap)
                self._col_means = acc
            return self._col_means

    def gamma_row(self, i: int) -> np.ndarray:
        """Gamma_i = 2 (P M)_i - P_i D [I + 2 (pi M)_d] over the window columns."""
        lam = self.model.local(i) @ self.m_row(i) + self.model.up(i) @ self.m_row(i + 1)
        if i >= 1:
            lam = lam + self.model.down(i) @ self.m_row(i - 1)
        gamma = 2.0 * lam
        scale = self.column_inverse() * (1.0 + 2.0 * self.column_means())
        for j, A in self._neighbours(i):
            gamma[:, self._col(j)] -= A * scale[self._col(j)][None, :]
        return gamma

    def second_moment_rhs(self) -> BlockRowSource:
        """E + Gamma."""
        with self._lock:
            if self._second_source is None:
                self._second_source = BlockRowSource(self._col_phases, lambda i: 1.0 + self.gamma_row(i))
            return self._second_source

    def second_moment_targets(self, pin: PinPolicy) -> np.ndarray:
        """Diagonal values M2_{(k,j),(k,j)} used to pin the second-moment system."""
        pin = PinPolicy(pin)
        if pin is PinPolicy.RETURN_IDENTITY:
            return (2.0 * self.column_means() - 1.0) * self.column_inverse()
        if pin is PinPolicy.ORACLE_DIAGONAL:
            chain = truncate_dense(self.model, self.oracle_truncation)
            targets = []
            for state in self.column_states():
                _, m2 = dense_passage_moments(chain, state)
                targets.append(m2[chain.index(state)])
            logger.debug(f"Second-moment pin from dense truncation N={self.oracle_truncation}")
            return np.array(targets)
        raise ValueError(f"pin policy {pin.value} cannot fix second moments")

    def second_moments(self, pin: PinPolicy = PinPolicy.ORACLE_DIAGONAL) -> PoissonSolution:
        pin = PinPolicy(pin)
        with self._lock:
            if pin not in self._second:
                self._second[pin] = solve_matrix_poisson(
                    self.model, self.f, self.second_moment_rhs(), pin, (self.I_max, self.J_max),
                    self.eps_tail, diagonal_targets=self.second_moment_targets(pin), stationary=self.stationary,
                )
                logger.info(f"Second moments solved with pin {pin.value}")
            return self._second[pin]

    def l2_via_t_route(self, pin: PinPolicy = PinPolicy.ORACLE_DIAGONAL) -> BlockMatrixWindow:
        """L2 from (I - P) L2 = (E + Gamma) diag(pi) with the pinned diagonal scaled by pi."""
        w = self.column_pi()
        rhs = self.second_moment_rhs()
        source = BlockRowSource(self._col_phases, lambda i: rhs(i) * w[None, :])
        targets = self.second_moment_targets(pin) * w
        return solve_matrix_poisson(self.model, self.f, source, pin, (self.I_max, self.J_max),
                                    self.eps_tail, diagonal_targets=targets).pinned

    def eta2_via_w_route(self, pin: PinPolicy = PinPolicy.ORACLE_DIAGONAL) -> np.ndarray:
        """eta2 from the single-column system with right side (E + Gamma) pi^T."""
        w = self.column_pi()
        rhs = self.second_moment_rhs()
        source = BlockRowSource((1,), lambda i: (rhs(i) @ w)[:, None])
        c0 = np.array([self.second_moments(pin).constants @ w])
        sol = solve_matrix_poisson(self.model, self.f, source, PinPolicy.RAW_FREE, (self.I_max, 0),
                                   self.eps_tail, constants=c0)
        return sol.pinned.data[:, 0]

    # ————————————————————————————————
    # REPORT
    # ————————————————————————————————
    def report(self, variance: bool = True, dual_route: bool = False,
               pin_second: PinPolicy = PinPolicy.ORACLE_DIAGONAL) -> MixingReport:
        M = self.M
        L = self.mixing_matrix()
        eta = self.eta()
        gaps: Dict[str, float] = {}
        if dual_route:
            gaps["L_poisson_route"] = max_norm(self.mixing_matrix("poisson").data - L.data)
        two = kemeny_censored_2x2(self.f) if self.f.phases(0) >= 2 else None
        extra = {}
        if variance:
            sol = self.second_moments(pin_second)
            var = variance_pipeline(self.model, self.f, self.stationary, M, sol.pinned,
                                    (self.I_max, self.J_max), analyzer=self if dual_route else None,
                                    pin=pin_second)
            extra = dict(M2=sol.pinned, L2=var.L2, eta2=var.eta2, V2=var.V2, v2_stationary=var.v2_stationary)
            if dual_route:
                gaps["L2_t_route"] = max_norm(self.l2_via_t_route(pin_second).data - var.L2.data)
                gaps["eta2_w_route"] = var.w_route_gap
        return MixingReport(
            M=M, L=L, eta=eta.eta, tau_partial=eta.tau_partial, divergence_flag=eta.divergence_flag,
            kemeny_censored=kemeny_censored(self.f), kemeny_censored_2x2=two,
            kemeny_pairs=kemeny_pair_spread(self.f), route_gaps=gaps, **extra,
        )


# ————————————————————————————————
# 5. FUNCTIONAL ENTRY POINTS
# ————————————————————————————————
def mean_first_passage(model: QbdModel, f: RgFactorization, pi: Optional[StationaryWindow],
                       window: Tuple[int, int] = (8, 8), eps_tail: float = 1e-12) -> BlockMatrixWindow:
    """M window with every diagonal pinned to the mean return time 1/pi."""
    return MixingAnalyzer(model, f, window, eps_tail, stationary=pi).M


def second_moment_first_passage(model: QbdModel, f: RgFactorization, pi: Optional[StationaryWindow],
                                M: Optional[PoissonSolution] = None, window: Tuple[int, int] = (8, 8),
                                eps_tail: float = 1e-12, pin: PinPolicy = PinPolicy.ORACLE_DIAGONAL,
                                oracle_truncation: Optional[int] = None) -> BlockMatrixWindow:
    """
    M2 window. A first-passage PoissonSolution from an earlier solve on the
    same window is reused for the rows the right side needs.
    """
    analyzer = MixingAnalyzer(model, f, window, eps_tail, stationary=pi, oracle_truncation=oracle_truncation,
                              first_passage=M)
    return analyzer.second_moments(pin).pinned


def variance_pipeline(model: QbdModel, f: RgFactorization, pi: PiLike, M: BlockMatrixWindow,
                      M2: BlockMatrixWindow, window: Tuple[int, int],
                      analyzer: Optional[MixingAnalyzer] = None,
                      pin: PinPolicy = PinPolicy.ORACLE_DIAGONAL) -> VarianceReport:
    """
    L2 = M2 diag(pi), eta2 = M2 pi^T, V2 = eta2 - eta*eta and v2 = pi V2.

    With an analyzer, eta2 is also recomputed through the single-column route
    and the relative gap reported.
    """
    I_max, J_max = window
    M, M2 = M.restrict(I_max, J_max), M2.restrict(I_max, J_max)
    L2 = mean_mixing_matrix(M2, pi)
    first, second = eta_vector(M, pi), eta_vector(M2, pi)
    V2 = second.eta - first.eta ** 2
    v2 = float(_flat_pi(pi, M2.row_phases) @ V2)
    gap = None
    if analyzer is not None:
        w_route = analyzer.eta2_via_w_route(pin)[:second.eta.size]
        gap = max_norm(w_route - second.eta) / (1.0 + max_norm(second.eta))
    return VarianceReport(L2, second.eta, V2, v2, first.divergence_flag or second.divergence_flag, gap)


def dense_mixing_report(chain: DenseChain) -> MixingReport:
    """
    The same report for a finite chain, from the dense oracles.

    Here the whole chain plays the role of the censored chain, so
    kemeny_censored is trace(Z) of the full chain.
    """
    pi = dense_stationary(chain)
    n = chain.n
    M = BlockMatrixWindow((n,), (n,), dense_mfpt(chain))
    M2 = BlockMatrixWindow((n,), (n,), dense_second_moments(chain))
    eta = eta_vector(M, pi)
    L = mean_mixing_matrix(M, pi)
    L2 = mean_mixing_matrix(M2, pi)
    eta2 = M2.data @ pi
    V2 = eta2 - eta.eta ** 2
    return MixingReport(
        M=M, L=L, eta=eta.eta, tau_partial=eta.tau_partial, divergence_flag=False,
        kemeny_censored=float(np.trace(fundamental_matrix(chain, pi))),
        kemeny_censored_2x2=_censored_pair(np.asarray(chain.P), (0, 1)) if n >= 2 else None,
        M2=M2, L2=L2, eta2=eta2, V2=V2, v2_stationary=float(pi @ V2),
    )
