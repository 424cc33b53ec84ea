"""
QbdMix Package

Mixing times of level-dependent quasi-birth-death chains:

- Models: block-tridiagonal QBD definitions, validation, dense truncation, builtins
- Factorization: R-, G-, U-measures and the UL-type RG-factorization
- Stationary: windowed matrix-product stationary distribution
- Poisson: censored and block matrix Poisson solvers with pin policies
- Mixing: mean and second moments of first-passage and mixing times, Kemeny constants
- Oracle: dense finite-chain solvers and a seeded Monte Carlo simulator
- Logging: setup_logger, ReportWriter
"""

__version__ = "1.0.0"

# -------------------------
# Core Classes
# -------------------------
from .config import RunConfig, Tolerances, TOLERANCE_PRESETS
from .errors import (
    QbdMixError, ModelParseError, StructureError, ModelValidationError, NotRecurrentError,
    NonConvergenceError, NumericError, StationaryUnderflowError, InconsistentSystemError,
    CapExceededError, UsageError,
)
from .model import BoundaryPolicy, DenseChain, LevelBlocks, QbdModel, ValidationReport, Violation
from .factorization import BlockMatrixWindow, BlockRowSource, RgFactorization
from .stationary import StationaryWindow
from .poisson import GeneralizedInverseSpec, MatrixPoissonSolver, PinPolicy, PoissonSolution
from .mixing import EtaPartial, MixingAnalyzer, MixingReport, VarianceReport
from .oracle import DenseKemeny, MomentEstimate
from .utils import ReportWriter, setup_logger

# -------------------------
# Module-level function aliases
# -------------------------
# Model
from .model import builtin_model, load_model, truncate_dense, validate, write_model

# Factorization
from .factorization import (
    apply_gl_inverse, apply_ru_inverse, measure_residuals, rg_residual, solve_level_dependent,
    solve_tail_rg, x_product, y_product,
)

# Stationary
from .stationary import censored_stationary, stationary_window, stationary_window_covering

# Poisson
from .poisson import (
    generalized_inverse, poisson_residual, solve_censored, solve_censored_generalized, solve_matrix_poisson,
)

# Mixing
from .mixing import (
    dense_mixing_report, eta_vector, kemeny_censored, kemeny_censored_2x2, kemeny_pair_spread,
    mean_first_passage, mean_mixing_matrix, second_moment_first_passage, variance_pipeline,
)

# Oracle
from .oracle import (
    dense_kemeny, dense_mfpt, dense_passage_moments, dense_second_moments, dense_stationary,
    simulate_mixing, simulate_passage,
)

# -------------------------
# Exports
# -------------------------
__all__ = [
    # Core classes
    "RunConfig",
    "Tolerances",
    "TOLERANCE_PRESETS",
    "BoundaryPolicy",
    "DenseChain",
    "LevelBlocks",
    "QbdModel",
    "ValidationReport",
    "Violation",
    "BlockMatrixWindow",
    "BlockRowSource",
    "RgFactorization",
    "StationaryWindow",
    "GeneralizedInverseSpec",
    "MatrixPoissonSolver",
    "PinPolicy",
    "PoissonSolution",
    "EtaPartial",
    "MixingAnalyzer",
    "MixingReport",
    "VarianceReport",
    "DenseKemeny",
    "MomentEstimate",
    "ReportWriter",
    "setup_logger",

    # Errors
    "QbdMixError",
    "ModelParseError",
    "StructureError",
    "ModelValidationError",
    "NotRecurrentError",
    "NonConvergenceError",
    "NumericError",
    "StationaryUnderflowError",
    "InconsistentSystemError",
    "CapExceededError",
    "UsageError",

    # Model functions
    "builtin_model",
    "load_model",
    "truncate_dense",
    "validate",
    "write_model",

    # Factorization functions
    "apply_gl_inverse",
    "apply_ru_inverse",
    "measure_residuals",
    "rg_residual",
    "solve_level_dependent",
    "solve_tail_rg",
    "x_product",
    "y_product",

    # Stationary functions
    "censored_stationary",
    "stationary_window",
    "stationary_window_covering",

    # Poisson functions
    "generalized_inverse",
    "poisson_residual",
    "solve_censored",
    "solve_censored_generalized",
    "solve_matrix_poisson",

    # Mixing functions
    "dense_mixing_report",
    "eta_vector",
    "kemeny_censored",
    "kemeny_censored_2x2",
    "kemeny_pair_spread",
    "mean_first_passage",
    "mean_mixing_matrix",
    "second_moment_first_passage",
    "variance_pipeline",

    # Oracle functions
    "dense_kemeny",
    "dense_mfpt",
    "dense_passage_moments",
    "dense_second_moments",
    "dense_stationary",
    "simulate_mixing",
    "simulate_passage",
]
