import numpy as np
import pytest

from QbdMix.errors import CapExceededError
from QbdMix.mixing import MixingAnalyzer
from QbdMix.model import truncate_dense
from QbdMix.oracle import MomentEstimate, simulate_mixing, simulate_passage


def _within(est, value, widths=3.0):
    return abs(est.mean - value) <= widths * est.half_width_95


def test_two_state_passage(two_state):
    est = simulate_passage(two_state, 0, 1, paths=20_000, seed=3)
    assert _within(est, 2.0)
    assert est.variance == pytest.approx(2.0, rel=0.1)
    assert est.paths == 20_000 and est.seed == 3


def test_two_state_mixing(two_state):
    est = simulate_mixing(two_state, paths=20_000, seed=5)
    assert _within(est, 1.0)
    assert est.variance == pytest.approx(2.0, rel=0.1)


def test_bd_passage_on_infinite_chain(bd):
    est = simulate_passage(bd, (0, 0), (1, 0), paths=20_000, seed=11)
    assert _within(est, 5.0)
    assert est.variance == pytest.approx(20.0, rel=0.1)


def test_bd_return_time_on_infinite_chain(bd):
    est = simulate_passage(bd, (0, 0), (0, 0), paths=20_000, seed=13)
    assert _within(est, 2.0)
    assert est.variance == pytest.approx(18.0, rel=0.1)


def test_mixing_on_two_level_qbd(two_level):
    est = simulate_mixing(two_level, paths=20_000, seed=17)
    assert _within(est, 1.0)
    assert est.variance == pytest.approx(2.0, rel=0.1)


def test_mixing_on_sticky_boundary_terminates(sticky):
    est = simulate_mixing(sticky, paths=200, seed=1)
    assert np.isfinite(est.mean) and est.mean >= 0.0
    assert est.paths == 200


def test_two_phase_passage_matches_rg_route(two_phase, two_phase_f):
    M = MixingAnalyzer(two_phase, two_phase_f, (2, 2)).M
    est = simulate_passage(two_phase, (2, 1), (0, 0), paths=20_000, seed=2)
    assert _within(est, M.block(2, 0)[1, 0])


def test_seed_reproducibility_and_thread_independence(bd):
    a = simulate_passage(bd, (0, 0), (2, 0), paths=5_000, seed=7, threads=1)
    b = simulate_passage(bd, (0, 0), (2, 0), paths=5_000, seed=7, threads=3)
    c = simulate_passage(bd, (0, 0), (2, 0), paths=5_000, seed=8, threads=1)
    assert a == b
    assert a.mean != c.mean


def test_dense_and_infinite_samplers_agree(bd):
    chain = truncate_dense(bd, 60)
    a = simulate_passage(chain, (0, 0), (1, 0), paths=2_000, seed=4)
    b = simulate_passage(bd, (0, 0), (1, 0), paths=2_000, seed=4)
    assert a.mean == b.mean


def test_argument_checks(bd):
    with pytest.raises(ValueError):
        simulate_passage(bd, (0, 0), (1, 0), paths=99, seed=1)
    with pytest.raises(ValueError):
        simulate_passage(bd, (0, 0), (0, 1), paths=100, seed=1)
    with pytest.raises(ValueError):
        simulate_mixing(bd, paths=0, seed=1)
    with pytest.raises(CapExceededError) as e:
        simulate_passage(bd, (0, 0), (6, 0), paths=100, seed=1, cap=2)
    assert e.value.unfinished == 100


def test_moment_estimate():
    est = MomentEstimate.from_samples(np.array([3, 3, 3, 3]), seed=9)
    assert est.mean == 3.0 and est.variance == 0.0 and est.half_width_95 == 0.0
    est = MomentEstimate.from_samples(np.array([1, 2, 3, 4]), seed=9)
    assert est.half_width_95 == pytest.approx(1.96 * np.sqrt(np.var([1, 2, 3, 4], ddof=1) / 4))
    assert est.dict()["paths"] == 4


@pytest.mark.slow
@pytest.mark.parametrize("source", ["bd", "two_state"])
def test_concordance_over_seeds(source, bd, two_state):
    chain, start, target, mean, variance = {
        "bd": (bd, (0, 0), (1, 0), 5.0, 20.0),
        "two_state": (two_state, 0, 1, 2.0, 2.0),
    }[source]
    hits = 0
    for s in range(1, 101):
        est = simulate_passage(chain, start, target, paths=1_000_000, seed=s)
        hits += _within(est, mean) and est.variance == pytest.approx(variance, rel=0.03)
    assert hits >= 99
