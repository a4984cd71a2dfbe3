"""Builders mapping the worked estimation problems onto network models.

Each builder returns a problem object bundling the model, the realized
ground truth, the observation, and problem-specific evaluation helpers.
"""

from dataclasses import dataclass, field

import numpy as np

from .activations import ElementwiseMap, LinearCombinationMap, get_activation
from .errors import InvalidConfigError
from .model import (
    AdditiveGaussianLayer,
    LinearLayer,
    MixtureOutputLayer,
    NetworkModel,
    SignalStack,
)
from .priors import (
    GaussianRowPrior,
    RowNormRegularizer,
    spike_slab_prior,
)
from .rng import derive_rng
from .se import predict_test_error

__all__ = [
    "TwoLayerProblem",
    "MultiTaskProblem",
    "MixedRegressionProblem",
    "build_two_layer",
    "build_multi_task",
    "build_mixed_regression",
    "empirical_test_error",
    "test_error_covariance",
]


@dataclass
class TwoLayerProblem:
    """Learning the input weights of y = sigma(x @ f1) @ f2 + noise."""

    model: NetworkModel
    signals: SignalStack
    x: np.ndarray
    f1_true: np.ndarray
    f2: np.ndarray
    activation: object
    noise_var: float
    snr_db: float
    seed: int

    @property
    def y(self):
        return self.signals.y

    @property
    def n_samples(self):
        return self.x.shape[0]

    @property
    def n_in(self):
        return self.x.shape[1]

    def realized_snr_db(self):
        signal = self.signals.z[1]
        power = float(np.mean((self.activation(signal) @ self.f2) ** 2))
        noise = float(np.mean(self.signals.xi[1] ** 2))
        return 10.0 * np.log10(power / noise)


@dataclass
class MultiTaskProblem:
    """Joint regression y = x @ f + noise with a row-coupled prior."""

    model: NetworkModel
    signals: SignalStack
    x: np.ndarray
    f_true: np.ndarray
    noise_var: float
    map_penalty: object = None
    active_prob: float = 1.0

    @property
    def y(self):
        return self.signals.y


@dataclass
class MixedRegressionProblem:
    """y_i comes from one of two linear models, selector unknown."""

    model: NetworkModel
    signals: SignalStack
    x: np.ndarray
    f_true: np.ndarray
    q_prob: float
    noise_var: float

    @property
    def y(self):
        return self.signals.y


def build_two_layer(n_samples, n_in, d, activation="sigmoid", snr_db=10.0,
                    seed=0, n_out=1):
    """Construct the two-layer learning instance.

    f1 (n_in x d) and f2 (d x n_out) have iid standard normal entries;
    x (n_samples x n_in) has variance 1/n_in so pre-activations have unit
    variance; output noise is calibrated to snr_db relative to the mean
    power of the noiseless output.
    """
    if n_samples < 1 or d < 1:
        raise InvalidConfigError("n_samples and d must be >= 1")
    act = activation if not isinstance(activation, str) \
        else get_activation(activation)
    x = derive_rng(seed, "two-layer-x").standard_normal(
        (n_samples, n_in)) / np.sqrt(n_in)
    f2 = derive_rng(seed, "two-layer-f2").standard_normal((d, n_out))
    f1 = derive_rng(seed, "two-layer-f1").standard_normal((n_in, d))
    z1 = x @ f1
    clean = act(z1) @ f2
    power = float(np.mean(clean**2))
    noise_var = 0.0 if np.isinf(snr_db) else power / 10.0 ** (snr_db / 10.0)

    layers = [
        LinearLayer(w=x, noise_prec=None),
        AdditiveGaussianLayer(LinearCombinationMap(act, f2),
                              noise_var * np.eye(n_out)),
    ]
    model = NetworkModel(layers, GaussianRowPrior(np.zeros(d), np.eye(d)), d)
    if noise_var > 0:
        xi2 = derive_rng(seed, "two-layer-noise").standard_normal(
            (n_samples, n_out)) * np.sqrt(noise_var)
    else:
        xi2 = np.zeros((n_samples, n_out))
    signals = SignalStack(
        z=[f1, z1, clean + xi2],
        xi=[np.zeros((n_samples, d)), xi2],
    )
    return TwoLayerProblem(model=model, signals=signals, x=x, f1_true=f1,
                           f2=f2, activation=act, noise_var=noise_var,
                           snr_db=snr_db, seed=seed)


def build_multi_task(n_samples, n_features, d, prior="gaussian",
                     noise_var=0.01, seed=0, active_prob=0.1, lam=None):
    """Multi-task regression as a 2-layer model with identity output.

    ``prior`` selects the MMSE row prior: 'gaussian' or 'row_sparse'
    (spike-and-slab with the given active row probability).  ``lam``
    additionally attaches the row-norm penalty used in MAP mode, which
    reproduces the group-sparse least-squares objective.
    """
    if prior == "gaussian":
        row_prior = GaussianRowPrior(np.zeros(d), np.eye(d))
        active = 1.0
    elif prior == "row_sparse":
        row_prior = spike_slab_prior(d, active_prob)
        active = active_prob
    else:
        raise InvalidConfigError(f"unknown multi-task prior {prior!r}")
    x = derive_rng(seed, "multi-task-x").standard_normal(
        (n_samples, n_features)) / np.sqrt(n_features)
    f = row_prior.sample(n_features, derive_rng(seed, "multi-task-f"))
    z1 = x @ f
    if noise_var > 0:
        xi = derive_rng(seed, "multi-task-noise").standard_normal(
            (n_samples, d)) * np.sqrt(noise_var)
    else:
        xi = np.zeros((n_samples, d))
    layers = [
        LinearLayer(w=x, noise_prec=None),
        AdditiveGaussianLayer(
            ElementwiseMap(get_activation("identity"), d),
            noise_var * np.eye(d)),
    ]
    model = NetworkModel(layers, row_prior, d)
    signals = SignalStack(z=[f, z1, z1 + xi],
                          xi=[np.zeros((n_samples, d)), xi])
    penalty = RowNormRegularizer(lam, d) if lam is not None else None
    return MultiTaskProblem(model=model, signals=signals, x=x, f_true=f,
                            noise_var=noise_var, map_penalty=penalty,
                            active_prob=active)


def build_mixed_regression(n_samples, n_features, q_prob, noise_var, seed=0):
    """Mixed linear regression: two predictors, latent binary selector."""
    if not 0.0 <= q_prob <= 1.0:
        raise InvalidConfigError("q_prob must be in [0, 1]")
    d = 2
    x = derive_rng(seed, "mixed-x").standard_normal(
        (n_samples, n_features)) / np.sqrt(n_features)
    prior = GaussianRowPrior(np.zeros(d), np.eye(d))
    f = prior.sample(n_features, derive_rng(seed, "mixed-f"))
    z1 = x @ f
    out = MixtureOutputLayer(q_prob, noise_var)
    xi = out.sample_noise(n_samples, derive_rng(seed, "mixed-noise"))
    y = out.apply(z1, xi)
    layers = [LinearLayer(w=x, noise_prec=None), out]
    model = NetworkModel(layers, prior, d)
    signals = SignalStack(z=[f, z1, y], xi=[np.zeros((n_samples, d)), xi])
    return MixedRegressionProblem(model=model, signals=signals, x=x,
                                  f_true=f, q_prob=q_prob,
                                  noise_var=noise_var)


def test_error_covariance(f1_true, f1_hat):
    """Empirical 2d x 2d row covariance of [true, estimated] weights."""
    u = np.concatenate([f1_true, f1_hat], axis=1)
    return u.T @ u / f1_true.shape[0]


def empirical_test_error(problem, f1_hat, n_test=1000, rng=None, n_mc=100000):
    """Held-out test error of the pre-activation estimate, both routes.

    Draws fresh inputs x ~ N(0, I/n_in) and averages
    |f2^T (sigma(x^T f1_true) - sigma(x^T f1_hat))|^2; also evaluates the
    covariance route on the same weight pair.  Returns a dict with
    'empirical', 'covariance_route', and their ratio.
    """
    rng = rng or derive_rng(problem.seed, "test-samples")
    x = rng.standard_normal((n_test, problem.n_in)) / np.sqrt(problem.n_in)
    diff = (problem.activation(x @ problem.f1_true)
            - problem.activation(x @ f1_hat)) @ problem.f2
    emp = float(np.mean(np.einsum("ni,ni->n", diff, diff)))
    k_cov = test_error_covariance(problem.f1_true, f1_hat)
    cov_route, cov_se = predict_test_error(
        k_cov, problem.f2, problem.activation, n_mc=n_mc,
        rng=derive_rng(problem.seed, "test-error-route"))
    return {
        "empirical": emp,
        "covariance_route": cov_route,
        "covariance_route_se": cov_se,
        "ratio": emp / cov_route if cov_route > 0 else float("nan"),
        "k_cov": k_cov,
    }
