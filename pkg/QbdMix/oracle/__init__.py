"""Independent referees: dense finite-chain solvers and a Monte Carlo path simulator."""

from .dense import (
    DenseKemeny, dense_kemeny, dense_mfpt, dense_passage_moments, dense_second_moments,
    dense_stationary, fundamental_matrix,
)
from .simulate import MomentEstimate, simulate_mixing, simulate_passage

__all__ = [
    "DenseKemeny",
    "dense_kemeny",
    "dense_mfpt",
    "dense_passage_moments",
    "dense_second_moments",
    "dense_stationary",
    "fundamental_matrix",
    "MomentEstimate",
    "simulate_mixing",
    "simulate_passage",
]
