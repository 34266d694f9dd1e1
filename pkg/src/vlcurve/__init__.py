"""Mean trajectories from sparse longitudinal measurements whose time origins are unknown."""

from .em import DmaxSweep, FitConfig, FitResult, estimate, fit, identifiability_diagnostics, sweep_d
from .estep import observed_loglik, responsibilities
from .evaluation import bias_check, d_sensitivity, nmse, replicate_experiment
from .model import (
    AR1Covariance,
    Dataset,
    FullCovariance,
    LinearCovariance,
    ModelDims,
    OnsetWeights,
    SubjectRecord,
    TrajectoryParams,
)
from .mstep import GammaGrid, Unconstrained, Unimodal, UnimodalGamma
from .simulate import preset_truth, simulate_semisynthetic, simulate_synthetic

__version__ = "0.1.0"

__all__ = [
    "AR1Covariance", "Dataset", "DmaxSweep", "FitConfig", "FitResult", "FullCovariance", "GammaGrid",
    "LinearCovariance", "ModelDims", "OnsetWeights", "SubjectRecord", "TrajectoryParams", "Unconstrained",
    "Unimodal", "UnimodalGamma", "bias_check", "d_sensitivity", "estimate", "fit", "identifiability_diagnostics",
    "nmse", "observed_loglik", "preset_truth", "replicate_experiment", "responsibilities",
    "simulate_semisynthetic", "simulate_synthetic", "sweep_d",
]
