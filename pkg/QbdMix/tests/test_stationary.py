import numpy as np
import pytest

from QbdMix.errors import NumericError, StationaryUnderflowError
from QbdMix.factorization import solve_level_dependent
from QbdMix.mixing import MixingAnalyzer
from QbdMix.model import truncate_dense
from QbdMix.oracle import dense_stationary
from QbdMix.stationary import *


def test_bd_geometric(bd, bd_f):
    pi = stationary_window(bd, bd_f, 20)
    assert pi.phi == pytest.approx(0.5, abs=1e-12)
    for k in range(21):
        assert pi.block(k)[0] == pytest.approx(2.0 ** -(k + 1), abs=1e-10)
    assert pi.tail_mass_bound < 1e-6


def test_two_phase_product_form(two_phase, two_phase_f):
    rho = 0.5
    nu = np.array([4 / 7, 3 / 7])
    pi = stationary_window(two_phase, two_phase_f, 10)
    for k in range(11):
        assert np.allclose(pi.block(k), (1 - rho) * rho ** k * nu, atol=1e-12)


def test_prefix_stability(n3, n3_f):
    short = stationary_window(n3, n3_f, 4)
    long = stationary_window(n3, n3_f, 25)
    assert short.phi == long.phi
    for k in range(5):
        assert np.array_equal(short.block(k), long.block(k))
    assert long.tail_mass_bound < short.tail_mass_bound


def test_matches_dense_oracle(fleet):
    J = 6
    for model in fleet[:8]:
        f = solve_level_dependent(model)
        pi = stationary_window(model, f, J).flat()
        dense = dense_stationary(truncate_dense(model, J + 60))[:pi.size]
        assert np.max(np.abs(pi - dense) / dense) <= 1e-8


def test_total_mass(n3, n3_f):
    pi = stationary_window(n3, n3_f, 60)
    assert pi.flat().sum() + pi.tail_mass_bound == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(ValueError):
        pi.flat(61)
    with pytest.raises(ValueError):
        stationary_window(n3, n3_f, -1)


def test_censored_stationary():
    U0 = np.array([[0.6, 0.4], [0.1, 0.9]])
    v0 = censored_stationary(U0)
    assert np.allclose(v0 @ U0, v0)
    assert v0.sum() == pytest.approx(1.0)
    assert np.allclose(v0, [0.2, 0.8])
    with pytest.raises(NumericError):
        censored_stationary(np.eye(2))


def test_inverse_diagonal_underflow(bd, bd_f):
    pi = stationary_window(bd, bd_f, 60)
    assert pi.inverse_diagonal(3)[0] == pytest.approx(16.0)
    with pytest.raises(StationaryUnderflowError):
        pi.inverse_diagonal(55)


def test_balance_equations(n3, n3_f, fleet):
    for model in [n3] + fleet[:6]:
        f = n3_f if model is n3 else solve_level_dependent(model)
        pi = stationary_window(model, f, 12)
        boundary = pi.block(0) @ model.local(0) + pi.block(1) @ model.down(1)
        assert np.max(np.abs(boundary - pi.block(0))) <= 1e-9
        for k in range(1, pi.J):
            inflow = (pi.block(k - 1) @ model.up(k - 1) + pi.block(k) @ model.local(k)
                      + pi.block(k + 1) @ model.down(k + 1))
            assert np.max(np.abs(inflow - pi.block(k))) <= 1e-9


def test_tail_bound_does_not_shrink_with_j(sticky, sticky_f):
    a = stationary_window(sticky, sticky_f, 512)
    b = stationary_window(sticky, sticky_f, 1024)
    assert a.tail_mass_bound == b.tail_mass_bound
    assert a.tail_mass_bound > 1e-12


def test_covering_window_meets_tail_target(sticky, sticky_f):
    assert sticky_f.tail_spectral_radius == pytest.approx(0.9)
    pi = stationary_window_covering(sticky, sticky_f, 8, 1e-12)
    assert pi.tail_mass_bound <= 1e-12
    assert pi.J >= 8
    wider = stationary_window_covering(sticky, sticky_f, pi.J + 20, 1e-12)
    for k in range(pi.J + 1):
        assert np.array_equal(pi.block(k), wider.block(k))
    with pytest.raises(ValueError):
        stationary_window_covering(sticky, sticky_f, 8, 0.0)


def test_analyzer_window_on_sticky_boundary(sticky, sticky_f):
    pi = MixingAnalyzer(sticky, sticky_f, (2, 2), eps_tail=1e-10).stationary
    assert pi.tail_mass_bound <= 1e-10
    assert pi.block(0)[0] > 0.98
