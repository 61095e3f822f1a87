"""Kolmogorov-Arnold networks as multichannel MLPs.

Spline and truncated-ReLU-power bases linked by a banded change of basis,
exact multilevel refinement, free-knot training, and conditioning analysis.
"""

from .basis import eval_basis, eval_bspline_basis, eval_trunc_power_basis
from .bench import ExperimentConfig, ResultRow, gen_dataset, run_experiment, target_nonsmooth, target_xor
from .cob import (
    BlockDiagonalCOB,
    ChangeOfBasis,
    apply_cob,
    apply_cob_inverse,
    build_A1,
    build_Ar,
    build_Ar_uniform,
    toeplitz_spectral_bound,
)
from .knots import BasisKind, FreeKnotParam, KnotVector, knots_from_params, make_uniform_knots, params_from_knots
from .network import (
    KanLayer,
    MlpLayer,
    Network,
    build_kan,
    build_mlp,
    convert_basis,
    count_flops_per_sample,
    count_params,
    loss_and_grad,
    network_forward,
)
from .optim import (
    AdamConfig,
    LbfgsConfig,
    NumericalFailure,
    Schedule,
    preconditioned_gd_step,
    train_multilevel,
)
from .refinement import RefinementOp, build_interpolation, refine_layer, refine_network, subdivide_knots
from .spectra import (
    condition_number,
    empirical_ntk,
    gram_matrix,
    min_batch_size,
    nullspace_demo,
    scaled_cob_norm,
    scaled_ntk_pair,
)

__version__ = "0.1.0"

__all__ = [
    "eval_basis",
    "eval_bspline_basis",
    "eval_trunc_power_basis",
    "ExperimentConfig",
    "ResultRow",
    "gen_dataset",
    "run_experiment",
    "target_nonsmooth",
    "target_xor",
    "BlockDiagonalCOB",
    "ChangeOfBasis",
    "apply_cob",
    "apply_cob_inverse",
    "build_A1",
    "build_Ar",
    "build_Ar_uniform",
    "toeplitz_spectral_bound",
    "BasisKind",
    "FreeKnotParam",
    "KnotVector",
    "knots_from_params",
    "make_uniform_knots",
    "params_from_knots",
    "KanLayer",
    "MlpLayer",
    "Network",
    "build_kan",
    "build_mlp",
    "convert_basis",
    "count_flops_per_sample",
    "count_params",
    "loss_and_grad",
    "network_forward",
    "AdamConfig",
    "LbfgsConfig",
    "NumericalFailure",
    "Schedule",
    "preconditioned_gd_step",
    "train_multilevel",
    "RefinementOp",
    "build_interpolation",
    "refine_layer",
    "refine_network",
    "subdivide_knots",
    "condition_number",
    "empirical_ntk",
    "gram_matrix",
    "min_batch_size",
    "nullspace_demo",
    "scaled_cob_norm",
    "scaled_ntk_pair",
]
