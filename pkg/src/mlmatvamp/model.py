"""The L-layer generative stack: alternating linear / row-wise nonlinear
layers, ground-truth generation, transition densities, JSON description.

Layer indexing follows the generative convention: position p in
``layers`` is network layer p+1, so even positions are linear and odd
positions are nonlinear, and the stack ends with a nonlinear output
layer (L even).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .activations import (
    ElementwiseMap,
    LinearCombinationMap,
    get_activation,
)
from .errors import (
    DimensionError,
    InvalidConfigError,
    InvalidModelError,
    NoDensityError,
)
from .linalg import SvdFactors, inv_psd, sample_rows_gaussian, svd_factor, sym
from .priors import prior_from_config
from .rng import derive_rng

__all__ = [
    "LinearLayer",
    "AdditiveGaussianLayer",
    "GeneralNonlinearLayer",
    "MixtureOutputLayer",
    "NetworkModel",
    "SignalStack",
    "generate_signals",
    "log_transition",
    "model_to_config",
    "model_from_config",
    "save_model",
    "load_model",
]


@dataclass
class LinearLayer:
    """z_out = w @ z_in + b + noise, noise rows N(0, noise_prec^{-1}).

    ``noise_prec`` of None means the layer is exactly noiseless.
    """

    w: np.ndarray
    b: np.ndarray = None
    noise_prec: np.ndarray = None
    svd: SvdFactors = field(default=None, repr=False)

    kind = "linear"

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.b is None:
            self.b = np.zeros((self.w.shape[0], 1))
        self.b = np.asarray(self.b, dtype=float)
        if self.noise_prec is not None:
            self.noise_prec = sym(np.asarray(self.noise_prec, dtype=float))
        if self.svd is None:
            self.svd = svd_factor(self.w)

    @property
    def n_out(self):
        return self.w.shape[0]

    @property
    def n_in(self):
        return self.w.shape[1]

    def bias_full(self, d):
        """Bias as a full (n_out, d) matrix; a stored d-vector broadcasts."""
        if self.b.shape == (self.n_out, d):
            return self.b
        if self.b.shape in ((self.n_out, 1), (1, d)):
            return np.broadcast_to(self.b, (self.n_out, d)).copy()
        raise DimensionError(
            f"bias shape {self.b.shape} incompatible with ({self.n_out}, {d})"
        )

    def noise_cov(self):
        if self.noise_prec is None:
            return None
        return inv_psd(self.noise_prec)

    def sample_noise(self, d, rng):
        if self.noise_prec is None:
            return np.zeros((self.n_out, d))
        return sample_rows_gaussian(self.n_out, self.noise_cov(), rng)

    def apply(self, z_in, xi, d):
        return self.w @ z_in + self.bias_full(d) + xi


class AdditiveGaussianLayer:
    """z_out = psi(z_in) + noise with Gaussian row noise N(0, noise_cov).

    This is the deterministic-plus-additive-Gaussian case that admits a
    row-wise transition density, hence MAP/MMSE denoising.
    """

    kind = "nonlinear"
    phi_kind = "gaussian-additive"

    def __init__(self, psi, noise_cov):
        self.psi = psi
        nc = np.asarray(noise_cov, dtype=float)
        if nc.ndim == 0:
            nc = nc * np.eye(psi.d_out)
        self.noise_cov = sym(nc)
        self.d_in = psi.d_in
        self.d_out = psi.d_out

    def sample_noise(self, n, rng):
        return sample_rows_gaussian(n, self.noise_cov, rng)

    def apply(self, z_in, xi):
        return self.psi(z_in) + xi

    def output_loglik(self, y, u_flat):
        """log p(y_row | z_in = u) up to a constant, vectorized.

        y: (n, d_out); u_flat: (m, d_in) nodes; returns (n or m,) when one
        argument broadcasts, else requires matching leading shapes.
        """
        resid = y - self.psi(u_flat)
        prec = inv_psd(self.noise_cov)
        return -0.5 * np.einsum("...i,ij,...j->...", resid, prec, resid)


class GeneralNonlinearLayer:
    """z_out = phi(z_in, xi) with an arbitrary iid row noise sampler.

    Supports generation always; denoising only when a row log-likelihood
    is supplied (``loglik(y, u)``).
    """

    kind = "nonlinear"
    phi_kind = "general"

    def __init__(self, phi, noise_sampler, d_in, d_out, loglik=None):
        self.phi = phi
        self.noise_sampler = noise_sampler
        self.d_in = d_in
        self.d_out = d_out
        self._loglik = loglik
        self.psi = None
        self.noise_cov = None

    def sample_noise(self, n, rng):
        return self.noise_sampler(n, rng)

    def apply(self, z_in, xi):
        return self.phi(z_in, xi)

    def output_loglik(self, y, u):
        if self._loglik is None:
            raise NoDensityError(
                "general nonlinear layer has no row likelihood; denoising "
                "needs phi_kind gaussian-additive or an explicit loglik"
            )
        return self._loglik(y, u)


class MixtureOutputLayer(GeneralNonlinearLayer):
    """Mixed-regression output: y = q*u[0] + (1-q)*u[1] + v.

    q ~ Bernoulli(q_prob) selects which column of the 2-column
    pre-activation generated the response; v ~ N(0, noise_var).  The
    binary q is marginalized analytically in the likelihood.
    """

    def __init__(self, q_prob, noise_var):
        if not 0.0 <= q_prob <= 1.0:
            raise InvalidConfigError("q_prob must be in [0, 1]")
        if noise_var <= 0:
            raise InvalidConfigError("mixture output needs noise_var > 0")
        self.q_prob = float(q_prob)
        self.noise_var = float(noise_var)

        def phi(z_in, xi):
            q, v = xi[:, 0], xi[:, 1]
            return (q * z_in[:, 0] + (1.0 - q) * z_in[:, 1] + v)[:, None]

        def noise_sampler(n, rng):
            q = (rng.random(n) < self.q_prob).astype(float)
            v = rng.standard_normal(n) * np.sqrt(self.noise_var)
            return np.column_stack([q, v])

        super().__init__(phi, noise_sampler, d_in=2, d_out=1,
                         loglik=self._mixture_loglik)

    def _mixture_loglik(self, y, u):
        yv = y[..., 0]
        lq0 = -0.5 * (yv - u[..., 0]) ** 2 / self.noise_var
        lq1 = -0.5 * (yv - u[..., 1]) ** 2 / self.noise_var
        with np.errstate(divide="ignore"):
            a = np.log(self.q_prob) + lq0
            b = np.log(1.0 - self.q_prob) + lq1
        if self.q_prob == 1.0:
            return lq0
        if self.q_prob == 0.0:
            return lq1
        return np.logaddexp(a, b)


class NetworkModel:
    """Alternating [linear, nonlinear, ...] stack plus an input row prior."""

    def __init__(self, layers, input_prior, d):
        self.layers = list(layers)
        self.input_prior = input_prior
        self.d = int(d)
        self._validate()

    def _validate(self):
        L = len(self.layers)
        if L < 2 or L % 2 != 0:
            raise InvalidModelError("layer count L must be even and >= 2")
        for p, layer in enumerate(self.layers):
            want = "linear" if p % 2 == 0 else "nonlinear"
            if layer.kind != want:
                raise InvalidModelError(
                    f"layer {p + 1} must be {want}, got {layer.kind}"
                )
        if self.input_prior.dim != self.d:
            raise InvalidModelError("prior dimension must equal column count d")
        rows = self.layers[0].n_in
        for p, layer in enumerate(self.layers):
            if layer.kind == "linear":
                if layer.n_in != rows:
                    raise InvalidModelError(
                        f"layer {p + 1} expects {layer.n_in} rows, chain has {rows}"
                    )
                rows = layer.n_out
            else:
                if layer.d_in != self.d:
                    raise InvalidModelError("nonlinear layer d_in must equal d")
                if p < len(self.layers) - 1 and layer.d_out != self.d:
                    raise InvalidModelError("hidden nonlinear layers must keep d")

    @property
    def L(self):
        return len(self.layers)

    @property
    def dims(self):
        """Row counts n_0..n_L."""
        out = [self.layers[0].n_in]
        for layer in self.layers:
            out.append(layer.n_out if layer.kind == "linear" else out[-1])
        return out

    @property
    def d_out(self):
        return self.layers[-1].d_out

    def layer(self, ell):
        """Network layer ell in 1..L."""
        return self.layers[ell - 1]

    def beta_ratios(self, base=None):
        dims = self.dims
        base = base or dims[0]
        return [n / base for n in dims]


@dataclass
class SignalStack:
    """Ground-truth matrices Z^0_0..Z^0_L and the realized noise."""

    z: list
    xi: list

    @property
    def y(self):
        return self.z[-1]

    def replay_error(self, model):
        """Max deviation when re-running the stack on the stored noise."""
        err = 0.0
        cur = self.z[0]
        for p, layer in enumerate(model.layers):
            if layer.kind == "linear":
                cur = layer.apply(cur, self.xi[p], model.d)
            else:
                cur = layer.apply(cur, self.xi[p])
            err = max(err, float(np.abs(cur - self.z[p + 1]).max()))
        return err


def generate_signals(model, rng):
    """Draw Z^0_0 from the prior and push it through the stack."""
    z0 = model.input_prior.sample(model.layers[0].n_in, rng)
    z = [z0]
    xi = []
    for layer in model.layers:
        if layer.kind == "linear":
            noise = layer.sample_noise(model.d, rng)
            z.append(layer.apply(z[-1], noise, model.d))
        else:
            noise = layer.sample_noise(z[-1].shape[0], rng)
            z.append(layer.apply(z[-1], noise))
        xi.append(noise)
    return SignalStack(z=z, xi=xi)


def log_transition(layer, z_out, z_in, d=None):
    """log p(z_out | z_in) up to an additive constant.

    Nonlinear gaussian-additive layers: row-wise, returns one value per
    row.  Linear layers: the rows couple through W, so the density is
    evaluated on full matrices and a single value is returned.
    """
    z_out = np.atleast_2d(np.asarray(z_out, dtype=float))
    z_in = np.atleast_2d(np.asarray(z_in, dtype=float))
    if layer.kind == "linear":
        if layer.noise_prec is None:
            raise NoDensityError("noiseless linear layer has no density")
        d = d if d is not None else z_out.shape[1]
        resid = z_out - layer.w @ z_in - layer.bias_full(d)
        return -0.5 * float(np.einsum("ni,ij,nj->", resid, layer.noise_prec, resid))
    if layer.phi_kind != "gaussian-additive":
        raise NoDensityError(
            "row-wise density requires a gaussian-additive nonlinear layer"
        )
    resid = z_out - layer.psi(z_in)
    prec = inv_psd(layer.noise_cov)
    return -0.5 * np.einsum("ni,ij,nj->n", resid, prec, resid)


# ---------------------------------------------------------------------------
# JSON model description ("schema": 1).  Weights are either explicit value
# lists or seeded generators, so a description file round-trips losslessly
# and rebuilds the identical model.
# ---------------------------------------------------------------------------


def _map_to_config(psi):
    if isinstance(psi, ElementwiseMap):
        return {"type": "elementwise", "activation": psi.activation.name,
                "dim": psi.d_in}
    if isinstance(psi, LinearCombinationMap):
        return {"type": "linear_combination", "activation": psi.activation.name,
                "weights": psi.weights.tolist()}
    raise InvalidConfigError(f"cannot serialize row map {type(psi).__name__}")


def _map_from_config(cfg):
    if cfg["type"] == "elementwise":
        return ElementwiseMap(get_activation(cfg["activation"]), cfg["dim"])
    if cfg["type"] == "linear_combination":
        return LinearCombinationMap(get_activation(cfg["activation"]),
                                    np.asarray(cfg["weights"]))
    raise InvalidConfigError(f"unknown row map type {cfg['type']!r}")


def model_to_config(model):
    layers = []
    for layer in model.layers:
        if layer.kind == "linear":
            layers.append({
                "kind": "linear",
                "w": layer.w.tolist(),
                "b": layer.b.tolist(),
                "noise_prec": None if layer.noise_prec is None
                else layer.noise_prec.tolist(),
            })
        elif isinstance(layer, MixtureOutputLayer):
            layers.append({
                "kind": "mixture_output",
                "q_prob": layer.q_prob,
                "noise_var": layer.noise_var,
            })
        elif isinstance(layer, AdditiveGaussianLayer):
            layers.append({
                "kind": "additive_gaussian",
                "map": _map_to_config(layer.psi),
                "noise_cov": layer.noise_cov.tolist(),
            })
        else:
            raise InvalidConfigError(
                f"cannot serialize layer {type(layer).__name__}"
            )
    return {
        "schema": 1,
        "d": model.d,
        "prior": model.input_prior.to_config(),
        "layers": layers,
    }


def model_from_config(cfg):
    if cfg.get("schema") != 1:
        raise InvalidConfigError("model config must declare schema 1")
    layers = []
    for lc in cfg["layers"]:
        kind = lc["kind"]
        if kind == "linear":
            layers.append(LinearLayer(
                w=np.asarray(lc["w"], dtype=float),
                b=np.asarray(lc["b"], dtype=float),
                noise_prec=None if lc["noise_prec"] is None
                else np.asarray(lc["noise_prec"], dtype=float),
            ))
        elif kind == "additive_gaussian":
            layers.append(AdditiveGaussianLayer(
                _map_from_config(lc["map"]),
                np.asarray(lc["noise_cov"], dtype=float),
            ))
        elif kind == "mixture_output":
            layers.append(MixtureOutputLayer(lc["q_prob"], lc["noise_var"]))
        else:
            raise InvalidConfigError(f"unknown layer kind {kind!r}")
    return NetworkModel(layers, prior_from_config(cfg["prior"]), cfg["d"])


def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_config(model), fh, indent=1, sort_keys=True)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_config(json.load(fh))


def gaussian_iid_linear(n_out, n_in, var, seed, tag="weights", index=0,
                        noise_prec=None, bias=None):
    """Convenience builder: W with iid N(0, var) entries from a derived stream."""
    rng = derive_rng(seed, tag, index)
    w = rng.standard_normal((n_out, n_in)) * np.sqrt(var)
    return LinearLayer(w=w, b=bias, noise_prec=noise_prec)
