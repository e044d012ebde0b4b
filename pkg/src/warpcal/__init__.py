"""warpcal: simulator calibration against a reference image via warping metrics.

The pipeline registers multichannel gridded images with boundary-preserving
diffeomorphic warps under the q-map metric, emulates the resulting amplitude
and phase distances with Gaussian processes over the simulator inputs, and
samples a Bayesian posterior for the inputs against the zero-distance
observation.
"""

from .calibration import (
    ChainConfig,
    PosteriorChain,
    Priors,
    gelman_rubin,
    log_likelihood,
    log_prior,
    posterior_summary,
    run_mcmc,
)
from .design import DesignMatrix, lhs_sample
from .emulator import (
    CVReport,
    GPHyperParams,
    GPModel,
    GPPrediction,
    TrainingSet,
    cov_exponential,
    gp_fit_mle,
    gp_neg_log_lik,
    gp_predict,
    load_models,
    loo_cv,
    save_models,
)
from .fileformat import read_field, write_field
from .grid import (
    Diffeomorphism,
    GridImage,
    QMapImage,
    apply_warp,
    compose,
    finite_diff_jacobian,
    group_action,
    l2_distance,
    l2_norm,
    qmap,
)
from .pipeline import (
    ImageRecipe,
    JumpField,
    ToyParams,
    build_image,
    build_scalar_image,
    generate_toy_run,
    ingest_jump_field,
    make_template,
    toy_warp,
    toy_warp_point,
    write_jump_field,
)
from .registration import (
    BasisSet,
    RegistrationConfig,
    RegistrationResult,
    build_basis,
    phase_distance,
    register,
    register_batch,
    registration_energy,
)

__version__ = "0.1.0"

__all__ = [
    "BasisSet",
    "ChainConfig",
    "CVReport",
    "DesignMatrix",
    "Diffeomorphism",
    "GPHyperParams",
    "GPModel",
    "GPPrediction",
    "GridImage",
    "ImageRecipe",
    "JumpField",
    "PosteriorChain",
    "Priors",
    "QMapImage",
    "RegistrationConfig",
    "RegistrationResult",
    "ToyParams",
    "TrainingSet",
    "apply_warp",
    "build_basis",
    "build_image",
    "build_scalar_image",
    "compose",
    "cov_exponential",
    "finite_diff_jacobian",
    "gelman_rubin",
    "generate_toy_run",
    "gp_fit_mle",
    "gp_neg_log_lik",
    "gp_predict",
    "group_action",
    "ingest_jump_field",
    "l2_distance",
    "l2_norm",
    "lhs_sample",
    "load_models",
    "log_likelihood",
    "log_prior",
    "loo_cv",
    "make_template",
    "phase_distance",
    "posterior_summary",
    "qmap",
    "read_field",
    "register",
    "register_batch",
    "registration_energy",
    "run_mcmc",
    "save_models",
    "toy_warp",
    "toy_warp_point",
    "write_field",
    "write_jump_field",
]
