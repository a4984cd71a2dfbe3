"""Row priors for the network input and their denoisers.

Each prior supplies sampling plus the posterior mean/covariance under a
Gaussian pseudo-likelihood with mean row r and precision gamma, which is
all the input denoiser needs.  Posterior formulas use the covariance
(not information) form so singular prior covariances (point masses,
spike components) work unchanged.
"""

import numpy as np

from .errors import InvalidConfigError, NoDensityError
from .linalg import inv_psd, sym

__all__ = [
    "GaussianRowPrior",
    "GaussianMixtureRowPrior",
    "PointMassRowPrior",
    "RowNormRegularizer",
    "spike_slab_prior",
    "prior_from_config",
]


class GaussianRowPrior:
    """Rows iid N(mean, cov)."""

    kind = "gaussian"

    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.cov = sym(np.asarray(cov, dtype=float))
        self.dim = self.mean.shape[0]

    def sample(self, n, rng):
        from .linalg import sample_rows_gaussian

        return self.mean[None, :] + sample_rows_gaussian(n, self.cov, rng)

    def second_moment(self):
        return self.cov + np.outer(self.mean, self.mean)

    def posterior(self, r, gamma):
        """Posterior mean rows and the (shared) posterior covariance."""
        r = np.atleast_2d(r)
        gi = inv_psd(gamma)
        blend = np.linalg.solve(self.cov + gi, self.cov)  # (S0+G^-1)^-1 S0
        mean = self.mean[None, :] + (r - self.mean[None, :]) @ blend
        cov = sym(self.cov - self.cov @ blend)
        return mean, cov

    def mmse_denoise(self, r, gamma):
        mean, cov = self.posterior(r, gamma)
        return mean, np.broadcast_to(cov, (r.shape[0],) + cov.shape)

    def map_denoise(self, r, gamma):
        # Gaussian prior: mode and mean coincide, curvature is constant.
        return self.mmse_denoise(r, gamma)

    def neg_log_density(self, z):
        z = np.atleast_2d(z) - self.mean[None, :]
        prec = inv_psd(self.cov)
        return 0.5 * np.einsum("ni,ij,nj->n", z, prec, z)

    def to_config(self):
        return {"name": "gaussian", "mean": self.mean.tolist(),
                "cov": self.cov.tolist()}


class GaussianMixtureRowPrior:
    """Rows iid from a finite Gaussian mixture; components may be singular."""

    kind = "gaussian_mixture"

    def __init__(self, weights, means, covs):
        self.weights = np.asarray(weights, dtype=float)
        self.weights = self.weights / self.weights.sum()
        self.means = np.asarray(means, dtype=float)
        self.covs = np.asarray([sym(c) for c in covs])
        self.dim = self.means.shape[1]

    def sample(self, n, rng):
        from .linalg import sample_rows_gaussian

        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for k in range(len(self.weights)):
            mask = comp == k
            if mask.any():
                out[mask] = self.means[k] + sample_rows_gaussian(
                    int(mask.sum()), self.covs[k], rng
                )
        return out

    def second_moment(self):
        m = np.zeros((self.dim, self.dim))
        for w, mu, c in zip(self.weights, self.means, self.covs):
            m += w * (c + np.outer(mu, mu))
        return m

    def mmse_denoise(self, r, gamma):
        r = np.atleast_2d(r)
        n = r.shape[0]
        gi = inv_psd(gamma)
        K = len(self.weights)
        log_ev = np.empty((n, K))
        means = np.empty((K, n, self.dim))
        covs = np.empty((K, self.dim, self.dim))
        for k in range(K):
            s = sym(self.covs[k] + gi)
            w_ev, v_ev = np.linalg.eigh(s)
            delta = r - self.means[k][None, :]
            white = delta @ (v_ev / np.sqrt(w_ev)) if w_ev.min() > 0 else None
            if white is None:
                raise NoDensityError("mixture evidence covariance is singular")
            log_ev[:, k] = (
                np.log(self.weights[k])
                - 0.5 * np.sum(np.log(w_ev))
                - 0.5 * np.einsum("ni,ni->n", white, white)
            )
            blend = np.linalg.solve(s, self.covs[k])
            means[k] = self.means[k][None, :] + delta @ blend
            covs[k] = sym(self.covs[k] - self.covs[k] @ blend)
        log_ev -= log_ev.max(axis=1, keepdims=True)
        resp = np.exp(log_ev)
        resp /= resp.sum(axis=1, keepdims=True)
        mean = np.einsum("nk,kni->ni", resp, means)
        cov = np.einsum("nk,kij->nij", resp, covs)
        cov += np.einsum("nk,kni,knj->nij", resp, means, means)
        cov -= mean[:, :, None] * mean[:, None, :]
        return mean, cov

    def map_denoise(self, r, gamma):
        raise NoDensityError(
            "MAP input denoising is not defined for mixture priors with "
            "singular components; use MMSE mode"
        )

    def to_config(self):
        return {
            "name": "gaussian_mixture",
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }


class PointMassRowPrior:
    """All rows equal a fixed vector."""

    kind = "point_mass"

    def __init__(self, value):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))
        self.dim = self.value.shape[0]

    def sample(self, n, rng):
        return np.tile(self.value, (n, 1))

    def second_moment(self):
        return np.outer(self.value, self.value)

    def mmse_denoise(self, r, gamma):
        r = np.atleast_2d(r)
        mean = np.tile(self.value, (r.shape[0], 1))
        return mean, np.zeros((r.shape[0], self.dim, self.dim))

    map_denoise = mmse_denoise

    def to_config(self):
        return {"name": "point_mass", "value": self.value.tolist()}


class RowNormRegularizer:
    """MAP-only input penalty lam * ||row||_2 (group-sparse regression).

    Not a probability distribution: it cannot be sampled, and MMSE mode
    must pair the problem with an actual row prior instead.
    """

    kind = "row_norm"

    def __init__(self, lam, dim):
        if lam < 0:
            raise InvalidConfigError("regularization weight must be >= 0")
        self.lam = float(lam)
        self.dim = dim

    def sample(self, n, rng):
        raise NoDensityError("row-norm regularizer is not samplable")

    def second_moment(self):
        return np.eye(self.dim)

    def mmse_denoise(self, r, gamma):
        raise NoDensityError("row-norm regularizer supports MAP mode only")

    def map_denoise(self, r, gamma, tol=1e-11, max_iter=200):
        r = np.atleast_2d(r)
        n, d = r.shape
        mean = np.zeros_like(r)
        covs = np.zeros((n, d, d))
        lam = self.lam
        # Subgradient condition for the zero row: ||r @ gamma|| <= lam.
        rg = r @ gamma
        zero = np.linalg.norm(rg, axis=1) <= lam
        for i in np.where(~zero)[0]:
            f = r[i].copy()
            for _ in range(max_iter):
                nf = np.linalg.norm(f)
                grad = lam * f / nf + (f - r[i]) @ gamma
                if np.abs(grad).max() <= tol:
                    break
                hess = lam * (np.eye(d) / nf - np.outer(f, f) / nf**3) + gamma
                f = f - np.linalg.solve(hess, grad)
            mean[i] = f
            nf = np.linalg.norm(f)
            hess = lam * (np.eye(d) / nf - np.outer(f, f) / nf**3) + gamma
            covs[i] = inv_psd(hess)
        return mean, covs

    def to_config(self):
        return {"name": "row_norm", "lam": self.lam, "dim": self.dim}


def spike_slab_prior(dim, active_prob, slab_cov=None):
    """Row-sparse prior: zero row w.p. 1-active_prob, else N(0, slab_cov)."""
    if not 0.0 < active_prob <= 1.0:
        raise InvalidConfigError("active_prob must be in (0, 1]")
    if slab_cov is None:
        slab_cov = np.eye(dim)
    return GaussianMixtureRowPrior(
        weights=[1.0 - active_prob, active_prob],
        means=[np.zeros(dim), np.zeros(dim)],
        covs=[np.zeros((dim, dim)), slab_cov],
    )


def prior_from_config(cfg):
    name = cfg.get("name")
    if name == "gaussian":
        return GaussianRowPrior(cfg["mean"], cfg["cov"])
    if name == "gaussian_mixture":
        return GaussianMixtureRowPrior(cfg["weights"], cfg["means"], cfg["covs"])
    if name == "point_mass":
        return PointMassRowPrior(cfg["value"])
    if name == "row_norm":
        return RowNormRegularizer(cfg["lam"], cfg["dim"])
    raise InvalidConfigError(f"unknown prior {name!r}")
