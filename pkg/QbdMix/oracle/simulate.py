"""
Monte Carlo estimates of passage and mixing times.

Paths are simulated in lockstep chunks of CHUNK lanes. Chunk c draws from a
Philox stream keyed by SeedSequence([seed, c]) and consumes CHUNK uniforms per
step whatever the number of live lanes, so path p = c*CHUNK + lane sees the
same variates for a given seed regardless of the path count or thread layout.
"""
from __future__ import annotations
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import Optional, Tuple, Union
import logging
import time

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

from QbdMix.config import resolve_threads
from QbdMix.errors import CapExceededError
from QbdMix.model import DenseChain, QbdModel

logger = logging.getLogger("QbdMix")

CHUNK = 4096
DEFAULT_CAP = 10_000_000
STATIONARY_TAIL = 1e-12

State = Union[int, Tuple[int, int]]


@dataclass(frozen=True)
class MomentEstimate:
    mean: float
    variance: float
    half_width_95: float
    paths: int
    seed: int

    @classmethod
    def from_samples(cls, samples: np.ndarray, seed: int) -> "MomentEstimate":
        n = samples.size
        mean = float(samples.mean())
        variance = float(samples.var(ddof=1)) if n >= 2 else 0.0
        return cls(mean, variance, 1.96 * float(np.sqrt(variance / n)), int(n), int(seed))

    def dict(self) -> dict:
        return asdict(self)


# ————————————————————————————————
# 1. SAMPLERS
# ————————————————————————————————
def _cumulative(rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-normalized cumulative sums and the last positive index of each row."""
    cum = np.cumsum(rows, axis=-1)
    cum = cum / cum[..., -1:]
    last = rows.shape[-1] - 1 - np.argmax((rows > 0)[..., ::-1], axis=-1)
    return cum, last


def _pick(cum_rows: np.ndarray, last: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum((cum_rows <= u[:, None]).sum(axis=1), last)


class _DenseSampler:
    def __init__(self, chain: DenseChain):
        self.chain = chain
        self.cum, self.last = _cumulative(chain.P)

    def encode(self, state: State) -> int:
        return self.chain.index(state)

    def step(self, codes: np.ndarray, u: np.ndarray) -> np.ndarray:
        return _pick(self.cum[codes], self.last[codes], u)


class _QbdSampler:
    """Transitions of the infinite chain; one table per level class 0..N*."""

    def __init__(self, model: QbdModel):
        self.model = model
        self.width = max(model.phase_sizes)
        n_star, w = model.n_star, self.width
        probs = np.zeros((n_star + 1, w, 3 * w))
        for c in range(n_star + 1):
            m = model.phases(c)
            if c >= 1:
                probs[c, :m, :model.phases(c - 1)] = model.down(c)
            probs[c, :m, w:w + m] = model.local(c)
            probs[c, :m, 2 * w:2 * w + model.phases(c + 1)] = model.up(c)
            probs[c, m:, w] = 1.0  # padding rows, never visited
        self.cum, self.last = _cumulative(probs)

    def encode(self, state: State) -> int:
        level, phase = state
        if level < 0 or not 0 <= phase < self.model.phases(level):
            raise ValueError(f"state {tuple(state)} not in model")
        return int(level) * self.width + int(phase)

    def step(self, codes: np.ndarray, u: np.ndarray) -> np.ndarray:
        level, phase = np.divmod(codes, self.width)
        cls = np.minimum(level, self.model.n_star)
        out = _pick(self.cum[cls, phase], self.last[cls, phase], u)
        move, new_phase = np.divmod(out, self.width)
        return (level + move - 1) * self.width + new_phase


def _sampler(source: Union[DenseChain, QbdModel]):
    if isinstance(source, DenseChain):
        return _DenseSampler(source)
    if isinstance(source, QbdModel):
        return _QbdSampler(source)
    raise TypeError(f"cannot simulate {type(source).__name__}")


# ————————————————————————————————
# 2. LOCKSTEP RUNNER
# ————————————————————————————————
def _stream(seed: int, chunk: int) -> Generator:
    return Generator(Philox(SeedSequence([int(seed), int(chunk)])))


def _run_chunk(sampler, seed: int, chunk: int, size: int, cap: int,
               start: Optional[int], target: Optional[int],
               stationary: Optional[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    rng = _stream(seed, chunk)
    if stationary is not None:
        codes, cum = stationary
        picks = np.searchsorted(cum, rng.random((2, CHUNK))[:, :size], side="right")
        picks = np.minimum(picks, codes.size - 1)
        state, goal = codes[picks[0]], codes[picks[1]]
        active = state != goal
    else:
        state = np.full(size, start, dtype=np.int64)
        goal = np.full(size, target, dtype=np.int64)
        active = np.ones(size, dtype=bool)
    times = np.zeros(size, dtype=np.int64)
    steps = 0
    while active.any():
        if steps >= cap:
            raise CapExceededError(int(active.sum()), cap)
        u = rng.random(CHUNK)[:size]
        idx = np.flatnonzero(active)
        state[idx] = sampler.step(state[idx], u[idx])
        times[idx] += 1
        active[idx] = state[idx] != goal[idx]
        steps += 1
    return times


def _run(sampler, paths: int, seed: int, cap: int, threads: Optional[int], **kwargs) -> np.ndarray:
    threads = resolve_threads() if threads is None else threads
    sizes = [min(CHUNK, paths - c * CHUNK) for c in range(-(-paths // CHUNK))]
    began = time.perf_counter()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda c: _run_chunk(sampler, seed, c, sizes[c], cap, **kwargs), range(len(sizes))))
    logger.info(f"Simulated {paths:,} paths in {time.perf_counter() - began:.2f}s on {threads} thread(s)")
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


# ————————————————————————————————
# 3. PUBLIC ESTIMATORS
# ————————————————————————————————
def simulate_passage(source: Union[DenseChain, QbdModel], start: State, target: State, paths: int,
                     seed: int, cap: int = DEFAULT_CAP, threads: Optional[int] = None) -> MomentEstimate:
    """
    Estimate the first passage time min{n >= 1: X_n = target} from `start`.

    When start == target this is the return time.
    """
    if paths < 100:
        raise ValueError(f"simulate_passage needs at least 100 paths, got {paths}")
    sampler = _sampler(source)
    samples = _run(sampler, paths, seed, cap, threads,
                   start=sampler.encode(start), target=sampler.encode(target), stationary=None)
    return MomentEstimate.from_samples(samples, seed)


def _stationary_table(sampler, source) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(source, DenseChain):
        from QbdMix.oracle.dense import dense_stationary
        pi = dense_stationary(source)
        codes = np.arange(source.n, dtype=np.int64)
    else:
        from QbdMix.factorization import solve_level_dependent
        from QbdMix.stationary import stationary_window_covering
        window = stationary_window_covering(source, solve_level_dependent(source), 8, STATIONARY_TAIL)
        pi = window.flat()
        codes = np.array([sampler.encode((k, j)) for k in range(window.J + 1) for j in range(source.phases(k))],
                         dtype=np.int64)
    cum = np.cumsum(pi)
    return codes, cum / cum[-1]


def simulate_mixing(source: Union[DenseChain, QbdModel], paths: int, seed: int,
                    cap: int = DEFAULT_CAP, threads: Optional[int] = None) -> MomentEstimate:
    """
    Estimate T = min{n >= 0: X_n = Y} with X_0 and Y drawn independently from pi.

    A path whose start already equals its target contributes T = 0.
    """
    if paths < 1:
        raise ValueError(f"simulate_mixing needs at least 1 path, got {paths}")
    sampler = _sampler(source)
    samples = _run(sampler, paths, seed, cap, threads, start=None, target=None,
                   stationary=_stationary_table(sampler, source))
    return MomentEstimate.from_samples(samples, seed)
