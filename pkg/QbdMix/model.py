"""
Level-dependent QBD transition structures.

A model is a boundary level 0, an inhomogeneous prefix of levels 1..N*-1 and a
homogeneous tail reused for every level >= N*. Blocks follow the usual
convention: A0 moves one level up, A1 stays, A2 moves one level down.
"""
from __future__ import annotations
from dataclasses import dataclass
from decimal import Decimal
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import json
import logging

import numpy as np

from QbdMix.errors import (
    ModelParseError, ModelValidationError, NotRecurrentError, NonConvergenceError, StructureError,
)
from QbdMix.utils import is_strongly_connected, spectral_radius

logger = logging.getLogger("QbdMix")

Number = Union[int, float, Decimal]


def _frozen(a, name: str = "block") -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


class BoundaryPolicy(str, Enum):
    REFLECT_TO_A1 = "reflect_to_A1"
    RENORMALIZE_ROWS = "renormalize_rows"


# ————————————————————————————————
# 1. IMMUTABLE MODEL
# ————————————————————————————————
@dataclass(frozen=True, eq=False)
class LevelBlocks:
    """Down/local/up blocks of one level."""
    A2: np.ndarray
    A1: np.ndarray
    A0: np.ndarray

    def __post_init__(self) -> None:
        for name in ("A2", "A1", "A0"):
            object.__setattr__(self, name, _frozen(getattr(self, name), name))

    def dict(self) -> dict:
        return {"A2": self.A2.tolist(), "A1": self.A1.tolist(), "A0": self.A0.tolist()}


@dataclass(frozen=True, eq=False)
class QbdModel:
    """
    Block-tridiagonal transition structure on (level, phase) pairs.

    Levels >= inhomogeneity_bound share tail_blocks, so the tail down block maps
    m_{N*} phases onto m_{N*-1} phases and the two counts must agree.
    """
    phase_sizes: Tuple[int, ...]
    boundary_A1: np.ndarray
    boundary_A0: np.ndarray
    level_blocks: Tuple[LevelBlocks, ...]
    tail_blocks: LevelBlocks
    inhomogeneity_bound: int
    name: str = "custom"

    def __post_init__(self) -> None:
        object.__setattr__(self, "phase_sizes", tuple(int(m) for m in self.phase_sizes))
        object.__setattr__(self, "boundary_A1", _frozen(self.boundary_A1, "boundary A1"))
        object.__setattr__(self, "boundary_A0", _frozen(self.boundary_A0, "boundary A0"))
        object.__setattr__(self, "level_blocks", tuple(
            b if isinstance(b, LevelBlocks) else LevelBlocks(*b) for b in self.level_blocks))
        if not isinstance(self.tail_blocks, LevelBlocks):
            object.__setattr__(self, "tail_blocks", LevelBlocks(*self.tail_blocks))
        self.check_structure()

    # ————————————————————————————————
    # STRUCTURE
    # ————————————————————————————————
    def check_structure(self) -> None:
        """Raise StructureError naming the first level whose blocks disagree."""
        n_star = self.inhomogeneity_bound
        m = self.phase_sizes
        if n_star < 1:
            raise StructureError(f"inhomogeneity_bound must be >= 1, got {n_star}", 0)
        if len(m) != n_star + 1:
            raise StructureError(f"expected {n_star + 1} phase sizes, got {len(m)}", 0)
        if any(k < 1 for k in m):
            raise StructureError(f"phase sizes must be positive, got {m}", 0)
        if len(self.level_blocks) != n_star - 1:
            raise StructureError(f"expected {n_star - 1} level block triples, got {len(self.level_blocks)}", 1)

        def expect(block: np.ndarray, shape: Tuple[int, int], level: int, label: str) -> None:
            if block.shape != shape:
                raise StructureError(f"{label} has shape {block.shape}, expected {shape}", level)

        expect(self.boundary_A1, (m[0], m[0]), 0, "A1")
        expect(self.boundary_A0, (m[0], m[1]), 0, "A0")
        for k, blocks in enumerate(self.level_blocks, start=1):
            expect(blocks.A2, (m[k], m[k - 1]), k, "A2")
            expect(blocks.A1, (m[k], m[k]), k, "A1")
            expect(blocks.A0, (m[k], m[k + 1]), k, "A0")
        tail = self.tail_blocks
        mt = m[n_star]
        for label in ("A2", "A1", "A0"):
            expect(getattr(tail, label), (mt, mt), n_star, f"tail {label}")
        if m[n_star - 1] != mt:
            raise StructureError(
                f"tail A2 maps {mt} phases down onto level {n_star - 1} which has {m[n_star - 1]}", n_star)

    # ————————————————————————————————
    # ACCESSORS
    # ————————————————————————————————
    @property
    def n_star(self) -> int:
        return self.inhomogeneity_bound

    def phases(self, k: int) -> int:
        return self.phase_sizes[min(k, self.n_star)]

    def up(self, k: int) -> np.ndarray:
        """A0 at level k."""
        if k == 0:
            return self.boundary_A0
        if k < self.n_star:
            return self.level_blocks[k - 1].A0
        return self.tail_blocks.A0

    def local(self, k: int) -> np.ndarray:
        """A1 at level k."""
        if k == 0:
            return self.boundary_A1
        if k < self.n_star:
            return self.level_blocks[k - 1].A1
        return self.tail_blocks.A1

    def down(self, k: int) -> np.ndarray:
        """A2 at level k >= 1."""
        if k < 1:
            raise ValueError("level 0 has no down block")
        if k < self.n_star:
            return self.level_blocks[k - 1].A2
        return self.tail_blocks.A2

    def offsets(self, levels: int) -> np.ndarray:
        """State offsets of levels 0..levels (length levels + 2)."""
        return np.concatenate([[0], np.cumsum([self.phases(k) for k in range(levels + 1)])])

    def dict(self) -> dict:
        return {
            "name": self.name,
            "phase_sizes": list(self.phase_sizes),
            "boundary": {"A1": self.boundary_A1.tolist(), "A0": self.boundary_A0.tolist()},
            "levels": [b.dict() for b in self.level_blocks],
            "tail": self.tail_blocks.dict(),
            "inhomogeneity_bound": self.inhomogeneity_bound,
        }


# ————————————————————————————————
# 2. VALIDATION
# ————————————————————————————————
@dataclass(frozen=True)
class Violation:
    kind: str          # row_sum | negative | exceeds_one | zero_block | reducible
    level: int
    row: int
    magnitude: float


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: Tuple[Violation, ...] = ()

    def dict(self) -> dict:
        return {"ok": self.ok, "violations": [vars(v) for v in self.violations]}


def validate(model: QbdModel, stochastic_tol: float = 1e-12) -> ValidationReport:
    """
    Check stochasticity, entry ranges, nonzero up/down blocks and irreducibility.

    The tail is reported as level N*. Irreducibility is tested on the graph of
    the truncation at N* + 2.
    """
    model.check_structure()
    found: List[Violation] = []

    for k in range(model.n_star + 1):
        blocks = [("A1", model.local(k)), ("A0", model.up(k))]
        if k >= 1:
            blocks.insert(0, ("A2", model.down(k)))
        for label, block in blocks:
            lo, hi = float(block.min()), float(block.max())
            if lo < 0:
                row = int(np.unravel_index(np.argmin(block), block.shape)[0])
                found.append(Violation("negative", k, row, -lo))
            if hi > 1:
                row = int(np.unravel_index(np.argmax(block), block.shape)[0])
                found.append(Violation("exceeds_one", k, row, hi - 1))
            if label in ("A0", "A2") and not np.any(block > 0):
                found.append(Violation("zero_block", k, -1, 0.0))
        sums = sum(b.sum(axis=1) for _, b in blocks)
        for row, s in enumerate(sums):
            if abs(s - 1.0) > stochastic_tol:
                found.append(Violation("row_sum", k, row, float(abs(s - 1.0))))

    p, _ = _assemble(model, model.n_star + 2, BoundaryPolicy.REFLECT_TO_A1)
    if not is_strongly_connected(p):
        found.append(Violation("reducible", -1, -1, 0.0))

    if found:
        logger.debug(f"Validation found {len(found)} violation(s) in model '{model.name}'")
    return ValidationReport(ok=not found, violations=tuple(found))


# ————————————————————————————————
# 3. DENSE TRUNCATION
# ————————————————————————————————
@dataclass(frozen=True, eq=False)
class DenseChain:
    """Finite stochastic matrix over (level, phase) labels."""
    states: Tuple[Tuple[int, int], ...]
    P: np.ndarray
    truncation_level: int
    boundary_policy: BoundaryPolicy = BoundaryPolicy.REFLECT_TO_A1

    def __post_init__(self) -> None:
        object.__setattr__(self, "states", tuple((int(l), int(j)) for l, j in self.states))
        object.__setattr__(self, "P", _frozen(self.P, "P"))
        n = len(self.states)
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape} but there are {n} states")
        defect = np.max(np.abs(self.P.sum(axis=1) - 1.0)) if n else 0.0
        if defect > 1e-12:
            raise ValueError(f"P is not stochastic: max row-sum defect {defect:.3e}")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.states)})

    @classmethod
    def from_matrix(cls, P: Sequence[Sequence[Number]]) -> "DenseChain":
        """Wrap a plain finite chain as a single-level chain."""
        arr = np.array(P, dtype=float)
        return cls(tuple((0, i) for i in range(arr.shape[0])), arr, 0)

    @property
    def n(self) -> int:
        return len(self.states)

    def index(self, state: Union[int, Tuple[int, int]]) -> int:
        if isinstance(state, (int, np.integer)):
            if not 0 <= state < self.n:
                raise ValueError(f"state index {state} outside 0..{self.n - 1}")
            return int(state)
        try:
            return self._index[(int(state[0]), int(state[1]))]
        except KeyError:
            raise ValueError(f"state {tuple(state)} not in chain") from None

    def level_indices(self, level: int) -> np.ndarray:
        return np.array([i for i, (l, _) in enumerate(self.states) if l == level], dtype=int)


def _assemble(model: QbdModel, N: int, policy: BoundaryPolicy) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    off = model.offsets(N)
    P = np.zeros((off[-1], off[-1]))
    for k in range(N + 1):
        rows = slice(off[k], off[k + 1])
        P[rows, off[k]:off[k + 1]] = model.local(k)
        if k >= 1:
            P[rows, off[k - 1]:off[k]] = model.down(k)
        if k < N:
            P[rows, off[k + 1]:off[k + 2]] = model.up(k)
        elif policy is BoundaryPolicy.REFLECT_TO_A1:
            P[rows, off[k]:off[k + 1]] += model.up(k)
    if policy is BoundaryPolicy.RENORMALIZE_ROWS:
        last = slice(off[N], off[N + 1])
        mass = P[last].sum(axis=1, keepdims=True)
        empty = np.flatnonzero(mass[:, 0] <= 0.0)
        if empty.size:
            raise StructureError(f"phase {int(empty[0])} has no mass left to renormalize", N)
        P[last] /= mass
    states = [(k, j) for k in range(N + 1) for j in range(model.phases(k))]
    return P, states


def truncate_dense(model: QbdModel, N: int,
                   policy: BoundaryPolicy = BoundaryPolicy.REFLECT_TO_A1) -> DenseChain:
    """Finite chain on levels 0..N with the level-N up mass folded per `policy`."""
    if N < model.n_star:
        raise ValueError(f"truncation level {N} below inhomogeneity bound {model.n_star}")
    policy = BoundaryPolicy(policy)
    P, states = _assemble(model, N, policy)
    if not is_strongly_connected(P):
        raise ValueError(f"truncation at level {N} is reducible")
    return DenseChain(tuple(states), P, N, policy)


# ————————————————————————————————
# 4. MODEL FILES
# ————————————————————————————————
def _matrix(doc: dict, key: str, where: str) -> np.ndarray:
    if key not in doc:
        raise ModelParseError("missing field", field=f"{where}.{key}" if where else key)
    raw = doc[key]
    if not isinstance(raw, list) or not all(isinstance(r, list) for r in raw):
        raise ModelParseError("matrix must be an array of arrays", field=f"{where}.{key}")
    try:
        rows = [[float(x) for x in r] for r in raw]
    except (TypeError, ValueError):
        raise ModelParseError("matrix entries must be decimal reals", field=f"{where}.{key}") from None
    if len({len(r) for r in rows}) > 1:
        raise ModelParseError("ragged matrix rows", field=f"{where}.{key}")
    width = len(rows[0]) if rows else 0
    return np.array(rows, dtype=float).reshape(len(rows), width)


def _section(doc: dict, key: str):
    if key not in doc:
        raise ModelParseError("missing field", field=key)
    return doc[key]


def model_from_dict(doc: dict) -> QbdModel:
    if not isinstance(doc, dict):
        raise ModelParseError("top level must be an object")
    sizes = _section(doc, "phase_sizes")
    if not isinstance(sizes, list) or not all(isinstance(m, int) for m in sizes):
        raise ModelParseError("phase sizes must be integers", field="phase_sizes")
    boundary = _section(doc, "boundary")
    levels = _section(doc, "levels")
    tail = _section(doc, "tail")
    n_star = _section(doc, "inhomogeneity_bound")
    if not isinstance(n_star, int):
        raise ModelParseError("must be an integer", field="inhomogeneity_bound")
    if not isinstance(levels, list):
        raise ModelParseError("must be an array", field="levels")
    return QbdModel(
        phase_sizes=tuple(sizes),
        boundary_A1=_matrix(boundary, "A1", "boundary"),
        boundary_A0=_matrix(boundary, "A0", "boundary"),
        level_blocks=tuple(
            LevelBlocks(*(_matrix(lv, key, f"levels[{i}]") for key in ("A2", "A1", "A0")))
            for i, lv in enumerate(levels)
        ),
        tail_blocks=LevelBlocks(*(_matrix(tail, key, "tail") for key in ("A2", "A1", "A0"))),
        inhomogeneity_bound=n_star,
        name=str(doc.get("name", "custom")),
    )


def load_model(path: Union[str, Path]) -> QbdModel:
    """Parse and validate a JSON model file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text, parse_float=Decimal)
    except json.JSONDecodeError as e:
        raise ModelParseError(e.msg, line=e.lineno, column=e.colno) from None
    model = model_from_dict(doc)
    report = validate(model)
    if not report.ok:
        raise ModelValidationError(report)
    logger.info(f"Loaded model '{model.name}' from {path}: N*={model.n_star}, m={model.phase_sizes}")
    return model


def write_model(model: QbdModel, path: Optional[Union[str, Path]] = None) -> str:
    """Serialize to the model-file schema; also writes to `path` when given."""
    text = json.dumps(model.dict(), indent=2)
    if path is not None:
        Path(path).write_text(text + "\n", encoding="utf-8")
    return text


# ————————————————————————————————
# 5. BUILTIN FIXTURES
# ————————————————————————————————
_PHASE_MIX = np.array([[0.7, 0.3], [0.4, 0.6]])


def _bd(p: float = 0.2, q: float = 0.4) -> QbdModel:
    if not (0 < p and 0 < q and p + q <= 1):
        raise ValueError(f"bd needs p, q > 0 and p + q <= 1, got p={p}, q={q}")
    if p >= q:
        raise NotRecurrentError(p / q, f"bd drifts up: p={p} >= q={q}")
    return QbdModel(
        phase_sizes=(1, 1),
        boundary_A1=[[1 - p]],
        boundary_A0=[[p]],
        level_blocks=(),
        tail_blocks=LevelBlocks([[q]], [[1 - p - q]], [[p]]),
        inhomogeneity_bound=1,
        name=f"bd(p={p}, q={q})",
    )


def _two_phase(rho: float = 0.5) -> QbdModel:
    if not 0 < rho < 1:
        raise NotRecurrentError(rho, "two_phase needs 0 < rho < 1")
    up, down = 0.4 * rho, 0.4
    return QbdModel(
        phase_sizes=(2, 2),
        boundary_A1=(1 - up) * _PHASE_MIX,
        boundary_A0=up * _PHASE_MIX,
        level_blocks=(),
        tail_blocks=LevelBlocks(down * _PHASE_MIX, (1 - up - down) * _PHASE_MIX, up * _PHASE_MIX),
        inhomogeneity_bound=1,
        name=f"two_phase(rho={rho})",
    )


def _spread(rng: np.random.Generator, masses: np.ndarray, sizes: Sequence[int]) -> List[np.ndarray]:
    """Split each row's per-direction mass over target phases."""
    rows = masses.shape[0]
    return [masses[:, [d]] * rng.dirichlet(np.full(m, 2.0), size=rows) for d, m in enumerate(sizes)]


def _random(levels: int = 4, phases: int = 3, seed: int = 0, max_radius: float = 0.6,
            attempts: int = 1000) -> QbdModel:
    from QbdMix.factorization import solve_tail_rg

    n_star, max_m = int(levels), int(phases)
    if n_star < 1 or max_m < 1:
        raise ValueError(f"random needs levels >= 1 and phases >= 1, got {levels}, {phases}")
    rng = np.random.default_rng(int(seed))
    for attempt in range(1, attempts + 1):
        m = rng.integers(1, max_m + 1, size=n_star + 1)
        m[n_star - 1] = m[n_star]

        a1, a0 = _spread(rng, rng.dirichlet([3.0, 2.0], size=m[0]), (m[0], m[1]))
        prefix = []
        for k in range(1, n_star):
            masses = rng.dirichlet([2.0, 2.0, 2.0], size=m[k])
            prefix.append(LevelBlocks(*_spread(rng, masses, (m[k - 1], m[k], m[k + 1]))))
        tail = _spread(rng, rng.dirichlet([4.0, 3.0, 2.0], size=m[n_star]), (m[n_star],) * 3)

        try:
            R, _ = solve_tail_rg(*tail)
        except (NotRecurrentError, NonConvergenceError):
            continue
        radius = spectral_radius(R)
        if radius >= max_radius:
            continue
        model = QbdModel(tuple(m), a1, a0, tuple(prefix), LevelBlocks(*tail), n_star,
                         name=f"random(levels={n_star}, phases={max_m}, seed={seed})")
        if validate(model).ok:
            logger.info(f"Random model accepted after {attempt} draw(s): sp(R)={radius:.4f}")
            return model
    raise ValueError(f"no recurrent random model with sp(R) < {max_radius} in {attempts} draws")


_BUILTINS = {
    "bd": lambda p: _bd(p.get("p", 0.2), p.get("q", 0.4)),
    "two_phase": lambda p: _two_phase(p.get("rho", 0.5)),
    "random": lambda p: _random(p.get("levels", 4), p.get("phases", 3),
                                p.get("seed", p.get("model_seed", 0)), p.get("max_radius", 0.6)),
}


def builtin_model(name: str, params: Optional[Dict[str, float]] = None) -> QbdModel:
    """Desk-scale fixtures: 'bd', 'two_phase', 'random'."""
    if name not in _BUILTINS:
        raise ValueError(f"Invalid builtin model. Use: {', '.join(_BUILTINS)}")
    return _BUILTINS[name](dict(params or {}))
