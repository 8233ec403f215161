"""Fine-grained bias-variance decomposition for random-feature and NTK regression.

Asymptotic theory (``moments``, ``tau``, ``decomposition``, ``ensemble``),
the symmetric ANOVA machinery (``anova``) and a finite-size Monte Carlo
counterpart (``simulator``).
"""

from .anova import HTable, VarDecomp, mobius_variance
from .decomposition import (
    Decomposition,
    RecombinedViews,
    TrainingLoss,
    decompose,
    decompose_ntk,
    decompose_rf,
    recombine,
    threshold_diagnostics,
    training_loss,
)
from .ensemble import EnsembleSpec, ensemble_test_error, optimal_ratio, scale_decomposition
from .moments import (
    Activation,
    GaussianMoments,
    compute_moments,
    effective_snr,
    get_activation,
    stein_check,
    teacher_moments,
)
from .simulator import SimConfig, estimate_decomposition, make_experiment
from .tau import (
    DegenerateBranchError,
    ModelShape,
    SolverError,
    TauSolution,
    ridgeless_ttau2,
    solve_tau,
)

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "Decomposition",
    "DegenerateBranchError",
    "EnsembleSpec",
    "GaussianMoments",
    "HTable",
    "ModelShape",
    "RecombinedViews",
    "SimConfig",
    "SolverError",
    "TauSolution",
    "TrainingLoss",
    "VarDecomp",
    "compute_moments",
    "decompose",
    "decompose_ntk",
    "decompose_rf",
    "effective_snr",
    "ensemble_test_error",
    "estimate_decomposition",
    "get_activation",
    "make_experiment",
    "mobius_variance",
    "optimal_ratio",
    "recombine",
    "ridgeless_ttau2",
    "scale_decomposition",
    "solve_tau",
    "stein_check",
    "teacher_moments",
    "threshold_diagnostics",
    "training_loss",
]
