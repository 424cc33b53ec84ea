"""
Stationary distribution of a positive-recurrent QBD in matrix-product form

    pi_0 = phi v0,    pi_k = phi v0 R_0 R_1 ... R_{k-1}
"""
from __future__ import annotations
from dataclasses import dataclass
from typing import TYPE_CHECKING, Tuple
import logging

import numpy as np

from QbdMix.errors import NonConvergenceError, NumericError, StationaryUnderflowError
from QbdMix.utils import is_strongly_connected

if TYPE_CHECKING:
    from QbdMix.factorization import RgFactorization
    from QbdMix.model import QbdModel

logger = logging.getLogger("QbdMix")

UNDERFLOW = 1e-14


@dataclass(frozen=True, eq=False)
class StationaryWindow:
    v0: np.ndarray
    phi: float
    pi_blocks: Tuple[np.ndarray, ...]
    tail_mass_bound: float
    horizon: int = 0

    @property
    def J(self) -> int:
        return len(self.pi_blocks) - 1

    def block(self, k: int) -> np.ndarray:
        return self.pi_blocks[k]

    def flat(self, J: int = None) -> np.ndarray:
        """pi_0 .. pi_J concatenated."""
        J = self.J if J is None else J
        if J > self.J:
            raise ValueError(f"window holds levels 0..{self.J}, asked for {J}")
        return np.concatenate(self.pi_blocks[:J + 1])

    def inverse_diagonal(self, k: int) -> np.ndarray:
        """Entries of diag(pi_k)^-1, refusing to divide by underflowed mass."""
        block = self.pi_blocks[k]
        if np.any(block < UNDERFLOW):
            raise StationaryUnderflowError(f"stationary mass underflow: min pi = {block.min():.3e}", k)
        return 1.0 / block

    def dict(self) -> dict:
        return {
            "v0": self.v0.tolist(), "phi": self.phi,
            "pi": [b.tolist() for b in self.pi_blocks],
            "tail_mass_bound": self.tail_mass_bound, "horizon": self.horizon,
        }


def censored_stationary(U0: np.ndarray) -> np.ndarray:
    """
    Probability row vector v0 with v0 (I - U0) = 0.

    Solves the rank-deficient system with the normalization v0 e = 1 appended
    as an extra equation, in the least-squares sense.
    """
    U0 = np.asarray(U0, dtype=float)
    m = U0.shape[0]
    if not is_strongly_connected(U0):
        raise NumericError("censored chain U0 is reducible", 0)
    a = np.vstack([(np.eye(m) - U0).T, np.ones((1, m))])
    b = np.zeros(m + 1)
    b[-1] = 1.0
    v0, *_ = np.linalg.lstsq(a, b, rcond=None)
    if v0.min() < -1e-12:
        raise NumericError(f"censored stationary vector has negative entries ({v0.min():.3e})", 0)
    v0 = np.clip(v0, 0.0, None)
    return v0 / v0.sum()


def stationary_window(model: "QbdModel", f: "RgFactorization", J: int,
                      eps_tail: float = 1e-12, cap: int = 10_000) -> StationaryWindow:
    """
    Stationary blocks pi_0..pi_J and the normalization constant phi.

    The series for phi stops on eps_tail alone, so phi and every block are
    independent of J; a larger J only appends blocks.
    """
    if J < 0:
        raise ValueError(f"J must be >= 0, got {J}")
    terms = []
    t = f.v0.copy()
    series = 0.0
    last = np.inf
    for k in range(cap):
        t = t @ f.r_block(k)
        last = float(t.sum())
        terms.append(t)
        series += last
        if last < eps_tail:
            break
    else:
        raise NonConvergenceError("stationary series did not fall below eps_tail", last, cap)
    horizon = len(terms)
    while len(terms) < J:
        terms.append(terms[-1] @ f.r_block(len(terms)))

    phi = 1.0 / (1.0 + series)
    sp = f.tail_spectral_radius
    geometric = last * sp / (1.0 - sp)
    blocks = [phi * f.v0] + [phi * terms[k - 1] for k in range(1, J + 1)]
    beyond = sum(float(s.sum()) for s in terms[J:horizon])
    tail_mass_bound = phi * (beyond + geometric)
    logger.debug(f"Stationary window J={J}: phi={phi:.12g}, horizon={horizon}, tail<={tail_mass_bound:.2e}")
    return StationaryWindow(f.v0, phi, tuple(blocks), tail_mass_bound, horizon)


def stationary_window_covering(model: "QbdModel", f: "RgFactorization", J: int, tail_target: float,
                               eps_tail: float = 1e-12, cap: int = 10_000) -> StationaryWindow:
    """
    Window over at least levels 0..J with tail_mass_bound <= tail_target.

    The series cutoff is tightened to eps <= tail_target (1 - sp) / (2 sp), which
    holds the geometric remainder under tail_target / 2, and the window is
    widened to the series horizon so no explicit terms remain beyond it. The
    cutoff depends only on eps_tail, tail_target and sp, so repeated calls with
    a larger J return the same blocks.
    """
    if tail_target <= 0:
        raise ValueError(f"tail_target must be positive, got {tail_target}")
    sp = f.tail_spectral_radius
    eps = eps_tail if sp <= 0 else min(eps_tail, 0.5 * tail_target * (1.0 - sp) / sp)
    window = stationary_window(model, f, J, eps, cap)
    if window.tail_mass_bound > tail_target:
        window = stationary_window(model, f, max(J, window.horizon), eps, cap)
    if window.tail_mass_bound > tail_target:
        raise NonConvergenceError(
            f"stationary tail mass {window.tail_mass_bound:.3e} above {tail_target:.1e}",
            window.tail_mass_bound, window.horizon,
        )
    logger.debug(f"Stationary cover J={window.J}: eps={eps:.2e}, tail<={window.tail_mass_bound:.2e}")
    return window
