from dataclasses import replace

import numpy as np
import pytest

from QbdMix.errors import NotRecurrentError
from QbdMix.factorization import *
from QbdMix.model import QbdModel, LevelBlocks
from QbdMix.utils import max_norm


def test_bd_measures(bd_f):
    assert bd_f.R_tail[0, 0] == pytest.approx(0.5, abs=1e-12)
    assert bd_f.G_tail[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert bd_f.r_block(0)[0, 0] == pytest.approx(0.5, abs=1e-12)
    assert bd_f.u_block(0)[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert bd_f.u_block(7)[0, 0] == pytest.approx(0.6, abs=1e-12)
    assert bd_f.Z[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert bd_f.tail_spectral_radius == pytest.approx(0.5)


def test_fleet_residuals(fleet):
    for model in fleet:
        f = solve_level_dependent(model)
        res = measure_residuals(model, f)
        assert max(res.values()) <= 1e-10
        assert f.u_form_gap <= 1e-8


def test_fleet_factorization_identity(fleet):
    for model in fleet:
        f = solve_level_dependent(model)
        assert rg_residual(model, f, model.n_star + 8) <= 1e-8


def test_factorization_identity_multi_phase(n3, n3_f, two_phase, two_phase_f):
    assert rg_residual(n3, n3_f, n3.n_star + 8) <= 1e-10
    assert rg_residual(two_phase, two_phase_f, 10) <= 1e-10
    with pytest.raises(ValueError):
        rg_residual(n3, n3_f, n3.n_star + 1)


def test_g_is_stochastic_when_recurrent(n3_f):
    for k in range(1, 6):
        assert np.allclose(n3_f.g_block(k).sum(axis=1), 1.0, atol=1e-10)


def test_transient_tail_is_rejected():
    with pytest.raises(NotRecurrentError) as e:
        solve_tail_rg(np.array([[0.2]]), np.array([[0.4]]), np.array([[0.4]]))
    assert e.value.spectral_radius >= 1 - 1e-6


def test_transient_level_dependent_model_is_rejected():
    model = QbdModel((1, 1), [[0.7]], [[0.3]], (), LevelBlocks([[0.2]], [[0.4]], [[0.4]]), 1)
    with pytest.raises(NotRecurrentError):
        solve_level_dependent(model)


def test_products(n3_f):
    expected = n3_f.r_block(2) @ n3_f.r_block(3) @ n3_f.r_block(4)
    assert np.allclose(x_product(n3_f, 2, 3), expected)
    assert np.allclose(y_product(n3_f, 3, 2), n3_f.g_block(3) @ n3_f.g_block(2))
    with pytest.raises(ValueError):
        y_product(n3_f, 2, 3)
    with pytest.raises(ValueError):
        x_product(n3_f, 1, 0)


def test_solve_i_minus_u(n3_f):
    rhs = np.array([[1.0, 2.0], [3.0, 4.0]])
    x = n3_f.solve_i_minus_u(2, rhs)
    assert np.allclose((np.eye(2) - n3_f.u_block(2)) @ x, rhs)
    with pytest.raises(ValueError):
        n3_f.solve_i_minus_u(0, rhs)
    with pytest.raises(ValueError):
        n3_f.g_block(0)


def test_apply_ru_inverse_finite_support(bd_f):
    B = BlockMatrixWindow((1, 1, 1, 1), (1,), np.array([[1.0], [2.0], [3.0], [4.0]]))
    C = apply_ru_inverse(bd_f, B)
    assert C.data[0, 0] == pytest.approx(1 + 0.5 * 2 + 0.25 * 3 + 0.125 * 4)
    assert C.data[3, 0] == pytest.approx(4.0)
    with pytest.raises(ValueError):
        apply_ru_inverse(bd_f, BlockRowSource((1,), lambda i: np.ones((1, 1))))


def test_apply_ru_inverse_geometric_series(bd_f):
    ones = BlockRowSource((1,), lambda i: np.ones((1, 1)))
    C = apply_ru_inverse(bd_f, ones, eps_tail=1e-13, levels=2)
    assert np.allclose(C.data[:, 0], 2.0, atol=1e-12)
    assert C.horizon > 30
    assert C.horizon_tail_norm < 1e-13


def test_apply_gl_inverse_cumulates(bd_f):
    X = BlockMatrixWindow((1, 1, 1), (1,), np.array([[1.0], [2.0], [3.0]]))
    A = apply_gl_inverse(bd_f, X)
    assert np.allclose(A.data[:, 0], [1.0, 3.0, 6.0])


def test_window_helpers():
    data = np.arange(25.0).reshape(5, 5)
    w = BlockMatrixWindow((1, 2, 2), (1, 2, 2), data)
    assert w.I_max == 2 and w.J_max == 2
    assert np.array_equal(w.block(1, 2), data[1:3, 3:5])
    assert np.array_equal(w.diagonal(), np.diag(data))
    small = w.restrict(1, 1)
    assert small.data.shape == (3, 3)
    frame = w.to_frame()
    assert list(frame.columns) == ["level_i", "phase_i", "level_j", "phase_j", "value"]
    assert frame.iloc[6].tolist() == [1, 0, 1, 0, 6.0]
    with pytest.raises(ValueError):
        BlockMatrixWindow((1,), (2,), np.zeros((1, 3)))


def test_summary_lists_blocks(n3_f):
    s = n3_f.summary()
    assert s["n_star"] == 3
    assert len(s["R"]) == 4 and len(s["G"]) == 4 and len(s["U"]) == 5
    assert s["iterations"]["tail"] >= 1


def _zero_start(step, shape, tol=1e-14, iters=200_000):
    R = np.zeros(shape)
    for _ in range(iters):
        new = step(R)
        if max_norm(new - R) < tol:
            return new
        R = new
    return R


def test_zero_start_iteration_reaches_minimal_r(n3, n3_f, bd, bd_f):
    for model, f in ((n3, n3_f), (bd, bd_f)):
        tail = model.tail_blocks
        R = _zero_start(lambda R: tail.A0 + R @ tail.A1 + R @ R @ tail.A2, tail.A0.shape)
        assert np.allclose(R, f.R_tail, atol=10 * f.tol + 1e-9)
        for l in range(model.n_star):
            A0, A1, A2 = model.up(l), model.local(l + 1), model.down(l + 2)
            R_next = f.r_block(l + 1)
            R = _zero_start(lambda R: A0 + R @ A1 + R @ R_next @ A2, A0.shape)
            assert np.allclose(R, f.r_block(l), atol=1e-9)


def test_fundamental_matrix_identities(n3_f, fleet):
    for f in [n3_f] + [solve_level_dependent(model) for model in fleet]:
        m = f.phases(0)
        e = np.ones(m)
        assert np.allclose(f.Z @ e, e, atol=1e-10)
        assert np.allclose(f.v0 @ f.Z, f.v0, atol=1e-10)
        assert np.allclose((np.eye(m) - f.U_seq[0]) @ e, 0.0, atol=1e-10)


def test_rg_residual_detects_perturbed_r(bd, bd_f):
    assert rg_residual(bd, bd_f, bd.n_star + 8) <= 1e-10
    bad = replace(bd_f, R_seq=(bd_f.R_seq[0] + 1e-3,) + tuple(bd_f.R_seq[1:]))
    assert rg_residual(bd, bad, bd.n_star + 8) >= 1e-4


def test_x_products_decay_at_tail_rate(n3_f, bd_f):
    for f in (n3_f, bd_f):
        rho = f.tail_spectral_radius
        norms = [max_norm(x_product(f, 0, k)) for k in range(1, 121)]
        ratios = [b / a for a, b in zip(norms[99:], norms[100:])]
        assert max(ratios) <= rho + 1e-6


def test_row_source_cache_is_bounded():
    calls = []
    source = BlockRowSource((1,), lambda i: calls.append(i) or np.full((1, 1), float(i)), max_rows=3)
    for i in range(10):
        assert source(i)[0, 0] == i
    assert source.cached_rows == 3
    assert source(9)[0, 0] == 9 and len(calls) == 10
    assert source(0)[0, 0] == 0 and len(calls) == 11
