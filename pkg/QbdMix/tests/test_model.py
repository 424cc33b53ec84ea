import json

import numpy as np
import pytest

from QbdMix.errors import ModelParseError, ModelValidationError, NotRecurrentError, StructureError
from QbdMix.factorization import solve_tail_rg
from QbdMix.model import *
from QbdMix.tests.conftest import DATA
from QbdMix.utils import spectral_radius


def _bd_doc(p=0.2, q=0.4):
    return {
        "phase_sizes": [1, 1],
        "boundary": {"A1": [[1 - p]], "A0": [[p]]},
        "levels": [],
        "tail": {"A2": [[q]], "A1": [[1 - p - q]], "A0": [[p]]},
        "inhomogeneity_bound": 1,
    }


def _write(tmp_path, doc, name="model.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc) if isinstance(doc, dict) else doc, encoding="utf-8")
    return path


def test_bd_blocks(bd):
    assert bd.n_star == 1
    assert bd.phases(0) == 1 and bd.phases(50) == 1
    assert bd.local(0)[0, 0] == pytest.approx(0.8)
    assert bd.up(0)[0, 0] == pytest.approx(0.2)
    assert bd.down(5)[0, 0] == pytest.approx(0.4)
    with pytest.raises(ValueError):
        bd.down(0)


def test_blocks_are_read_only(bd):
    with pytest.raises(ValueError):
        bd.tail_blocks.A0[0, 0] = 0.5


def test_validate_builtins(bd, two_phase, n3):
    for model in (bd, two_phase, n3):
        report = validate(model)
        assert report.ok
        assert report.violations == ()


def test_validate_reports_row_sum_and_negative():
    model = QbdModel(
        phase_sizes=(1, 1), boundary_A1=[[0.9]], boundary_A0=[[0.2]], level_blocks=(),
        tail_blocks=LevelBlocks([[0.5]], [[-0.1]], [[0.2]]), inhomogeneity_bound=1,
    )
    report = validate(model)
    kinds = {(v.kind, v.level) for v in report.violations}
    assert not report.ok
    assert ("row_sum", 0) in kinds
    assert ("negative", 1) in kinds
    assert report.dict()["ok"] is False


def test_validate_reports_zero_up_block():
    model = QbdModel(
        phase_sizes=(1, 1), boundary_A1=[[1.0]], boundary_A0=[[0.0]], level_blocks=(),
        tail_blocks=LevelBlocks([[0.5]], [[0.3]], [[0.2]]), inhomogeneity_bound=1,
    )
    report = validate(model)
    assert {v.kind for v in report.violations} >= {"zero_block", "reducible"}


def test_structure_error_names_level():
    with pytest.raises(StructureError) as e:
        QbdModel(
            phase_sizes=(2, 2), boundary_A1=np.eye(2) * 0.5, boundary_A0=np.eye(2) * 0.5, level_blocks=(),
            tail_blocks=LevelBlocks(np.eye(2) * 0.4, np.eye(3) * 0.4, np.eye(2) * 0.2),
            inhomogeneity_bound=1,
        )
    assert e.value.level == 1


def test_tail_down_block_must_match_previous_level():
    with pytest.raises(StructureError):
        QbdModel(
            phase_sizes=(1, 2), boundary_A1=[[0.5]], boundary_A0=[[0.25, 0.25]], level_blocks=(),
            tail_blocks=LevelBlocks(np.eye(2) * 0.4, np.eye(2) * 0.4, np.eye(2) * 0.2),
            inhomogeneity_bound=1,
        )


def test_load_shipped_models():
    bd = load_model(DATA / "bd.json")
    n3 = load_model(DATA / "two_phase_n3.json")
    assert bd.n_star == 1
    assert n3.n_star == 3 and n3.phase_sizes == (2, 2, 2, 2)
    assert len(n3.level_blocks) == 2


def test_write_then_load_is_exact(tmp_path, n3):
    path = tmp_path / "copy.json"
    write_model(n3, path)
    again = load_model(path)
    for k in range(n3.n_star + 2):
        assert np.array_equal(again.local(k), n3.local(k))
        assert np.array_equal(again.up(k), n3.up(k))
    assert again.name == n3.name


def test_parse_error_carries_position(tmp_path):
    path = _write(tmp_path, '{"phase_sizes": [1, 1],\n  "boundary": oops}')
    with pytest.raises(ModelParseError) as e:
        load_model(path)
    assert e.value.line == 2
    assert e.value.column is not None


def test_parse_error_names_missing_field(tmp_path):
    doc = _bd_doc()
    del doc["tail"]["A0"]
    with pytest.raises(ModelParseError) as e:
        load_model(_write(tmp_path, doc))
    assert e.value.field == "tail.A0"


def test_parse_error_on_non_numeric_entry(tmp_path):
    doc = _bd_doc()
    doc["boundary"]["A1"] = [["x"]]
    with pytest.raises(ModelParseError):
        load_model(_write(tmp_path, doc))


def test_load_rejects_non_stochastic_model(tmp_path):
    doc = _bd_doc()
    doc["tail"]["A1"] = [[0.5]]
    with pytest.raises(ModelValidationError) as e:
        load_model(_write(tmp_path, doc))
    assert not e.value.report.ok
    assert e.value.report.violations[0].kind == "row_sum"


def test_truncate_dense_is_stochastic(n3):
    chain = truncate_dense(n3, 10)
    assert chain.n == 2 * 11
    assert np.allclose(chain.P.sum(axis=1), 1.0, atol=1e-14)
    assert chain.index((3, 1)) == 7
    assert list(chain.level_indices(2)) == [4, 5]


def test_truncate_dense_policies(bd):
    reflect = truncate_dense(bd, 5)
    renorm = truncate_dense(bd, 5, BoundaryPolicy.RENORMALIZE_ROWS)
    assert reflect.P[5, 5] == pytest.approx(0.6)
    assert renorm.P[5, 4] == pytest.approx(0.4 / 0.8)
    with pytest.raises(ValueError):
        truncate_dense(load_model(DATA / "two_phase_n3.json"), 2)


def test_renormalize_rejects_rows_with_only_up_mass():
    model = QbdModel((1, 1), [[0.5]], [[0.5]], (), LevelBlocks([[0.0]], [[0.0]], [[1.0]]), 1)
    with pytest.raises(StructureError) as e:
        truncate_dense(model, 2, BoundaryPolicy.RENORMALIZE_ROWS)
    assert e.value.level == 2
    assert "phase 0" in str(e.value)


def test_dense_chain_rejects_non_stochastic():
    with pytest.raises(ValueError):
        DenseChain.from_matrix([[0.5, 0.4], [0.5, 0.5]])
    chain = DenseChain.from_matrix([[0.5, 0.5], [0.5, 0.5]])
    assert chain.index(1) == 1
    with pytest.raises(ValueError):
        chain.index(2)


def test_builtin_router():
    with pytest.raises(ValueError, match="Invalid builtin model"):
        builtin_model("mm1")
    with pytest.raises(NotRecurrentError):
        builtin_model("bd", {"p": 0.4, "q": 0.4})
    with pytest.raises(NotRecurrentError):
        builtin_model("two_phase", {"rho": 1.0})


def test_random_models_are_recurrent_and_reproducible():
    a = builtin_model("random", {"levels": 3, "phases": 3, "seed": 11})
    b = builtin_model("random", {"levels": 3, "phases": 3, "model_seed": 11})
    assert validate(a).ok
    assert a.phase_sizes == b.phase_sizes
    assert np.array_equal(a.tail_blocks.A0, b.tail_blocks.A0)
    assert a.phase_sizes[a.n_star - 1] == a.phase_sizes[a.n_star]
    R, _ = solve_tail_rg(a.tail_blocks.A2, a.tail_blocks.A1, a.tail_blocks.A0)
    assert spectral_radius(R) < 0.6


def test_model_dict_schema(two_phase):
    doc = two_phase.dict()
    assert set(doc) == {"name", "phase_sizes", "boundary", "levels", "tail", "inhomogeneity_bound"}
    assert doc["tail"]["A0"] == pytest.approx(np.array([[0.14, 0.06], [0.08, 0.12]]))
