"""Matrix-valued multi-layer VAMP inference and its state-evolution
predictor."""

from .activations import ACTIVATIONS, get_activation
from .applications import (
    build_mixed_regression,
    build_multi_task,
    build_two_layer,
    empirical_test_error,
)
from .denoisers import (
    BeliefSpec,
    DenoiserResult,
    DenoiserSuite,
    PrecisionBundle,
    input_denoise,
    jacobian_check,
    linear_denoise,
    nonlinear_denoise_map,
    nonlinear_denoise_mmse,
    output_denoise,
)
from .diagnostics import (
    compute_transformed_errors,
    gaussianity_report,
    wasserstein2_proxy,
)
from .engine import VampOptions, fixed_point_report, run
from .linalg import (
    psd_regularize,
    sample_haar_orthogonal,
    sample_rows_gaussian,
    svd_factor,
)
from .model import (
    AdditiveGaussianLayer,
    LinearLayer,
    MixtureOutputLayer,
    NetworkModel,
    SignalStack,
    generate_signals,
    load_model,
    log_transition,
    save_model,
)
from .priors import (
    GaussianMixtureRowPrior,
    GaussianRowPrior,
    PointMassRowPrior,
    RowNormRegularizer,
    spike_slab_prior,
)
from .quadrature import NewtonCfg, QuadratureCfg
from .rng import derive_rng
from .se import (
    SeOptions,
    predict_layer_mse,
    predict_test_error,
    se_initial_pass,
    se_run,
)

__version__ = "0.1.0"
