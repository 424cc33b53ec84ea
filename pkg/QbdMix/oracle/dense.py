"""
Dense finite-chain oracles.

Every routine here works on the full stochastic matrix of a DenseChain and is
independent of the RG machinery, so it can referee it.
"""
from __future__ import annotations
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from QbdMix.errors import NumericError
from QbdMix.model import DenseChain
from QbdMix.utils import is_strongly_connected

State = Union[int, Tuple[int, int]]


def _require_irreducible(chain: DenseChain) -> None:
    if not is_strongly_connected(chain.P):
        raise ValueError("chain is reducible")


def dense_stationary(chain: DenseChain) -> np.ndarray:
    """
    Stationary probability vector of a finite irreducible chain.

    Solves x (I - P + E) = 1^T, which is equivalent to x (I - P) = 0 with x e = 1.
    """
    _require_irreducible(chain)
    n = chain.n
    a = np.eye(n) - chain.P + np.ones((n, n))
    return np.linalg.solve(a.T, np.ones(n))


def fundamental_matrix(chain: DenseChain, pi: np.ndarray = None) -> np.ndarray:
    """Kemeny-Snell Z = (I - P + e pi)^-1."""
    pi = dense_stationary(chain) if pi is None else pi
    n = chain.n
    return np.linalg.inv(np.eye(n) - chain.P + np.outer(np.ones(n), pi))


def dense_mfpt(chain: DenseChain) -> np.ndarray:
    """
    Mean first passage matrix with return times on the diagonal.

    M = (I - Z + E Z_dg) diag(pi)^-1
    """
    pi = dense_stationary(chain)
    Z = fundamental_matrix(chain, pi)
    n = chain.n
    return (np.eye(n) - Z + np.outer(np.ones(n), np.diag(Z))) / pi[None, :]


def dense_passage_moments(chain: DenseChain, target: State) -> Tuple[np.ndarray, np.ndarray]:
    """
    First and second moments of the passage time to `target` from every state.

    The target entry holds the return-time moments, obtained by conditioning
    on the first step out of the target.
    """
    _require_irreducible(chain)
    t = chain.index(target)
    n = chain.n
    rest = np.array([i for i in range(n) if i != t], dtype=int)
    m1, m2 = np.zeros(n), np.zeros(n)
    if rest.size:
        Q = chain.P[np.ix_(rest, rest)]
        a = np.eye(rest.size) - Q
        try:
            m1_rest = np.linalg.solve(a, np.ones(rest.size))
            m2_rest = np.linalg.solve(a, np.ones(rest.size) + 2.0 * Q @ m1_rest)
        except np.linalg.LinAlgError as e:
            raise NumericError(f"absorbing solve for target {chain.states[t]} failed: {e}") from None
        m1[rest], m2[rest] = m1_rest, m2_rest
        out = chain.P[t, rest]
        m1[t] = 1.0 + out @ m1_rest
        m2[t] = 1.0 + 2.0 * out @ m1_rest + out @ m2_rest
    else:
        m1[t], m2[t] = 1.0, 1.0
    return m1, m2


def dense_second_moments(chain: DenseChain) -> np.ndarray:
    """Full second-moment matrix, one absorbing solve per target column."""
    out = np.empty((chain.n, chain.n))
    for j in range(chain.n):
        out[:, j] = dense_passage_moments(chain, j)[1]
    return out


@dataclass(frozen=True)
class DenseKemeny:
    constant: float
    constancy_deviation: float

    def __float__(self) -> float:
        return self.constant


def dense_kemeny(chain: DenseChain) -> DenseKemeny:
    """trace(Z) together with the spread of sum_j m_ij pi_j across starting states."""
    pi = dense_stationary(chain)
    Z = fundamental_matrix(chain, pi)
    M = (np.eye(chain.n) - Z + np.outer(np.ones(chain.n), np.diag(Z))) / pi[None, :]
    eta = M @ pi
    return DenseKemeny(float(np.trace(Z)), float(eta.max() - eta.min()))
