"""
qbd-mix: command-line front end.

Data goes to stdout as JSON (or CSV), diagnostics to stderr through the
"QbdMix" logger. Exit codes: 0 success, 1 model rejected, 2 numerical
failure, 3 usage error.
"""
from __future__ import annotations
from typing import Callable, Dict, List, Optional, Tuple
import argparse
import json
import logging
import sys

import numpy as np
import pandas as pd

from QbdMix import __version__
from QbdMix.config import TOLERANCE_PRESETS, RunConfig
from QbdMix.errors import (
    CapExceededError, ModelParseError, ModelValidationError, NonConvergenceError, NotRecurrentError,
    NumericError, StructureError, UsageError,
)
from QbdMix.factorization import BlockMatrixWindow, RgFactorization, measure_residuals, rg_residual, solve_level_dependent
from QbdMix.mixing import (
    MixingAnalyzer, eta_partial_sums, kemeny_censored, kemeny_censored_2x2, kemeny_pair_spread,
)
from QbdMix.model import QbdModel, builtin_model, load_model, truncate_dense, validate
from QbdMix.oracle import (
    dense_kemeny, dense_mfpt, dense_passage_moments, dense_stationary, simulate_mixing, simulate_passage,
)
from QbdMix.poisson import PinPolicy, poisson_residual
from QbdMix.stationary import stationary_window
from QbdMix.utils import ReportWriter, setup_logger, to_jsonable

logger = logging.getLogger("QbdMix")

SCHEMA_VERSION = 1

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2, 3

COMMANDS = ("validate", "factorize", "stationary", "mfpt", "mixing", "variance", "kemeny", "simulate", "compare")


# ————————————————————————————————
# 1. ARGUMENTS
# ————————————————————————————————
class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    source = common.add_mutually_exclusive_group()
    source.add_argument("--model", help="model file (JSON)")
    source.add_argument("--builtin", help="builtin model: bd, two_phase, random")
    common.add_argument("--p", type=float, help="bd: up probability")
    common.add_argument("--q", type=float, help="bd: down probability")
    common.add_argument("--rho", type=float, help="two_phase: load")
    common.add_argument("--levels", type=int, help="random: N*")
    common.add_argument("--phases", type=int, help="random: maximum phases per level")
    common.add_argument("--model-seed", type=int, help="random: generator seed")
    common.add_argument("--window", type=int, nargs=2, metavar=("I_MAX", "J_MAX"), default=(8, 8))
    common.add_argument("--tol", type=float)
    common.add_argument("--eps-tail", type=float)
    common.add_argument("--profile", choices=tuple(TOLERANCE_PRESETS), default="desk")
    common.add_argument("--pin", choices=("diagonal_mfpt", "raw_free"), default="diagonal_mfpt",
                        help="pin for the first-moment system")
    common.add_argument("--pin-second", choices=("oracle_diagonal", "return_identity"), default="oracle_diagonal",
                        help="pin for the second-moment system")
    common.add_argument("--truncation", type=int, help="dense-oracle truncation level (default J_max + 25)")
    common.add_argument("--format", choices=("json", "csv"), default="json")
    common.add_argument("--seed", type=int, default=1)
    common.add_argument("--paths", type=int, default=10_000)
    common.add_argument("--from", dest="start", type=int, nargs=2, metavar=("LEVEL", "PHASE"))
    common.add_argument("--to", dest="target", type=int, nargs=2, metavar=("LEVEL", "PHASE"))
    common.add_argument("--mixing", action="store_true", help="simulate: draw start and target from pi")
    common.add_argument("--dual-route", action="store_true", help="cross-check L, L2 and eta2 by second routes")
    common.add_argument("--record", help="append the report to this JSONL file")
    common.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"))

    parser = _Parser(prog="qbd-mix", description="Mixing times of level-dependent QBD chains.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


# ————————————————————————————————
# 2. SUBCOMMANDS
# ————————————————————————————————
def _load(config: RunConfig) -> QbdModel:
    if config.model_path is not None:
        return load_model(config.model_path)
    model = builtin_model(config.builtin, config.params)
    report = validate(model, config.tolerances.stochastic_tol)
    if not report.ok:
        raise ModelValidationError(report)
    return model


def _factorize(model: QbdModel, config: RunConfig) -> RgFactorization:
    t = config.tolerances
    return solve_level_dependent(model, t.tol, max_sweeps=t.max_sweeps, max_iters=t.max_iters,
                                 recurrence_margin=t.recurrence_margin)


def _analyzer(model: QbdModel, config: RunConfig) -> MixingAnalyzer:
    return MixingAnalyzer(model, _factorize(model, config), config.window, config.eps_tail,
                          oracle_truncation=config.oracle_truncation)


def _dense_for(model: QbdModel, config: RunConfig):
    N = config.oracle_truncation
    if N < max(config.window):
        raise UsageError(f"truncation {N} must cover the window {config.window}")
    return truncate_dense(model, N)


def _window_errors(rg: BlockMatrixWindow, dense: np.ndarray, chain) -> Dict[str, float]:
    rows = [chain.index(s) for s in rg.row_states()]
    cols = [chain.index(s) for s in rg.column_states()]
    ref = dense[np.ix_(rows, cols)]
    err = np.abs(rg.data - ref) / np.maximum(np.abs(ref), 1e-300)
    return {"max_relative_error": float(err.max()), "max_abs_error": float(np.abs(rg.data - ref).max())}


def cmd_validate(model: QbdModel, config: RunConfig) -> dict:
    return {"validation": validate(model, config.tolerances.stochastic_tol).dict(),
            "n_star": model.n_star, "phase_sizes": list(model.phase_sizes)}


def cmd_factorize(model: QbdModel, config: RunConfig) -> dict:
    f = _factorize(model, config)
    residuals = measure_residuals(model, f)
    residuals["factorization"] = rg_residual(model, f, model.n_star + 8)
    return {"factorization": f.summary(), "residuals": residuals}


def cmd_stationary(model: QbdModel, config: RunConfig) -> dict:
    f = _factorize(model, config)
    return {"stationary": stationary_window(model, f, config.window[1], config.eps_tail).dict()}


def cmd_mfpt(model: QbdModel, config: RunConfig) -> dict:
    analyzer = _analyzer(model, config)
    sol = analyzer.first_passage
    M = sol.free if config.pin_policy == PinPolicy.RAW_FREE.value else sol.pinned
    return {"M": M, "pin_policy": config.pin_policy, "constants": sol.constants,
            "residual": poisson_residual(model, M, analyzer.first_passage_rhs())}


def cmd_mixing(model: QbdModel, config: RunConfig) -> dict:
    report = _analyzer(model, config).report(variance=False, dual_route=config.dual_route)
    return report.dict() | {"L_frame": report.L}


def cmd_variance(model: QbdModel, config: RunConfig) -> dict:
    analyzer = _analyzer(model, config)
    report = analyzer.report(variance=True, dual_route=config.dual_route, pin_second=PinPolicy(config.pin_second))
    return report.dict() | {"M2_frame": report.M2, "pin_second": config.pin_second}


def cmd_kemeny(model: QbdModel, config: RunConfig) -> dict:
    analyzer = _analyzer(model, config)
    dense = dense_kemeny(_dense_for(model, config))
    f = analyzer.f
    return {
        "kemeny_censored": kemeny_censored(f),
        "kemeny_censored_2x2": kemeny_censored_2x2(f) if f.phases(0) >= 2 else None,
        "kemeny_pairs": kemeny_pair_spread(f),
        "dense_truncation_kemeny": dense.constant,
        "dense_constancy_deviation": dense.constancy_deviation,
        "eta_partial": analyzer.eta().dict(),
    }


def _states(model: QbdModel, config: RunConfig) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    start = config.start or (0, 0)
    target = config.target or (min(1, config.window[1]), 0)
    for state in (start, target):
        if state[0] < 0 or not 0 <= state[1] < model.phases(state[0]):
            raise UsageError(f"state {state} is not in the model")
    return start, target


def cmd_simulate(model: QbdModel, config: RunConfig) -> dict:
    if config.mixing:
        est = simulate_mixing(model, config.paths, config.seed, threads=config.threads)
        return {"mixing": est.dict()}
    start, target = _states(model, config)
    est = simulate_passage(model, start, target, config.paths, config.seed, threads=config.threads)
    return {"passage": est.dict(), "from": list(start), "to": list(target)}


def cmd_compare(model: QbdModel, config: RunConfig) -> dict:
    """RG route, dense truncation and simulation side by side."""
    analyzer = _analyzer(model, config)
    chain = _dense_for(model, config)
    I_max, J_max = config.window

    pi_rg = analyzer.stationary.flat(J_max)
    pi_dense = dense_stationary(chain)[:pi_rg.size]
    M = analyzer.M
    out = {
        "truncation": chain.truncation_level,
        "stationary": {"max_relative_error": float(np.max(np.abs(pi_rg - pi_dense) / pi_dense))},
        "M": _window_errors(M, dense_mfpt(chain), chain),
    }

    start, target = _states(model, config)
    if start[0] > I_max or target[0] > J_max:
        raise UsageError("compare needs --from within I_max and --to within J_max")
    t_col = M.column_states().index(tuple(target))
    row = sum(M.row_phases[:start[0]]) + start[1]
    m1_dense, m2_dense = dense_passage_moments(chain, target)
    m1_rg = float(M.data[row, t_col])
    passage = {"from": list(start), "to": list(target), "rg_mean": m1_rg,
               "dense_mean": float(m1_dense[chain.index(start)])}

    pin = PinPolicy(config.pin_second)
    M2 = analyzer.second_moments(pin).pinned
    m2_rg = float(M2.data[row, t_col])
    passage.update({"rg_second": m2_rg, "dense_second": float(m2_dense[chain.index(start)]),
                    "rg_variance": m2_rg - m1_rg ** 2})
    out["M2"] = _window_errors(M2, np.column_stack(
        [dense_passage_moments(chain, s)[1] for s in chain.states]), chain)

    if config.paths >= 100:
        est = simulate_passage(model, start, target, config.paths, config.seed, threads=config.threads)
        passage["simulation"] = est.dict()
        passage["simulation_mean_relative_error"] = abs(est.mean - m1_rg) / m1_rg
        passage["simulation_within_3_half_widths"] = abs(est.mean - m1_rg) <= 3 * est.half_width_95
    out["passage"] = passage

    eta = analyzer.eta()
    out["mixing"] = {
        "kemeny_censored": kemeny_censored(analyzer.f),
        "eta": eta.dict(),
        "eta_row0_partial_sums": eta_partial_sums(M, analyzer.stationary),
        "divergence_flag": eta.divergence_flag,
    }
    return out


HANDLERS: Dict[str, Callable[[QbdModel, RunConfig], dict]] = {
    "validate": cmd_validate,
    "factorize": cmd_factorize,
    "stationary": cmd_stationary,
    "mfpt": cmd_mfpt,
    "mixing": cmd_mixing,
    "variance": cmd_variance,
    "kemeny": cmd_kemeny,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
}


# ————————————————————————————————
# 3. RUN AND OUTPUT
# ————————————————————————————————
def _error(e: Exception) -> dict:
    return {"type": type(e).__name__, "message": str(e)}


def run(config: RunConfig) -> Tuple[int, dict]:
    """Execute one subcommand. Returns (exit code, report); never raises for library errors."""
    if config.command not in HANDLERS:
        raise UsageError(f"Invalid command. Use: {', '.join(HANDLERS)}")
    report = {"schema_version": SCHEMA_VERSION, "command": config.command, "config": config.dict()}
    try:
        model = _load(config)
        report["model"] = model.name
        report["result"] = HANDLERS[config.command](model, config)
        code = EXIT_OK
    except ModelValidationError as e:
        logger.error(f"Model rejected: {e}")
        report["validation"] = e.report.dict()
        report["error"] = _error(e)
        code = EXIT_INVALID
    except (ModelParseError, StructureError, NotRecurrentError) as e:
        logger.error(f"Model rejected: {e}")
        report["error"] = _error(e)
        code = EXIT_INVALID
    except (NonConvergenceError, NumericError, CapExceededError) as e:
        logger.error(f"Numerical failure: {e}")
        report["error"] = _error(e)
        code = EXIT_NUMERIC
    except (UsageError, ValueError, FileNotFoundError) as e:
        logger.error(f"Usage: {e}")
        report["error"] = _error(e)
        code = EXIT_USAGE

    if config.record_path:
        with ReportWriter(config.record_path) as writer:
            writer.write(_strip_frames(report))
    return code, report


def _strip_frames(obj):
    """Drop the *_frame entries kept only for CSV output."""
    if isinstance(obj, dict):
        return {k: _strip_frames(v) for k, v in obj.items() if not k.endswith("_frame")}
    if isinstance(obj, BlockMatrixWindow):
        return obj.dict()
    if isinstance(obj, list):
        return [_strip_frames(v) for v in obj]
    return obj


def _primary_window(result: dict) -> Optional[BlockMatrixWindow]:
    for key in ("M2_frame", "L_frame", "M"):
        if isinstance(result.get(key), BlockMatrixWindow):
            return result[key]
    return None


def render(report: dict, output_format: str = "json") -> str:
    """JSON text, or CSV: the main window row-major, else quantity,value pairs."""
    if output_format == "csv":
        window = _primary_window(report.get("result", {}))
        if window is not None:
            return window.to_frame().to_csv(index=False)
        flat = pd.json_normalize(to_jsonable(_strip_frames(report)), sep=".")
        frame = flat.T.reset_index()
        frame.columns = ["quantity", "value"]
        return frame.to_csv(index=False)
    return json.dumps(to_jsonable(_strip_frames(report)), indent=2)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        config = RunConfig.from_namespace(ns)
    except UsageError as e:
        print(f"qbd-mix: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    setup_logger(config.log_level)
    code, report = run(config)
    print(render(report, config.output_format if code == EXIT_OK else "json"))
    return code


if __name__ == "__main__":
    sys.exit(main())
