"""Belief denoisers for layer pairs, the endpoint denoisers, and their
averaged Jacobians.

Vectors are rows.  All Jacobians use the row convention: for f(x) = x @ A
the Jacobian is A, and the averaged Jacobian <dG/dR> is the mean of the
per-row d x d Jacobians.  With this orientation the algorithm's
Lambda = <dG/dR>^{-1} Gamma is symmetric, and the MMSE identity reads
<dG/dR> = Gamma @ mean-posterior-covariance.
"""

from dataclasses import dataclass

import numpy as np

from .activations import ElementwiseMap
from .errors import (
    DegenerateBeliefError,
    DimensionError,
    MapNoConvergenceError,
    NoDensityError,
    NumericalError,
)
from .linalg import inv_psd, sqrtm_psd, sym
from .quadrature import NewtonCfg, QuadratureCfg, standard_nodes

__all__ = [
    "PrecisionBundle",
    "BeliefSpec",
    "DenoiserResult",
    "RotatedLinearResult",
    "rotated_linear_denoise",
    "linear_denoise",
    "nonlinear_denoise_mmse",
    "nonlinear_denoise_map",
    "input_denoise",
    "output_denoise",
    "jacobian_check",
    "DenoiserSuite",
    "InputBlock",
    "LinearBlock",
    "NonlinearBlock",
    "OutputBlock",
]


@dataclass
class PrecisionBundle:
    """Message precisions feeding one pair denoiser."""

    gamma_minus: np.ndarray
    gamma_plus_prev: np.ndarray

    def __post_init__(self):
        self.gamma_minus = sym(np.asarray(self.gamma_minus, dtype=float))
        self.gamma_plus_prev = sym(np.asarray(self.gamma_plus_prev, dtype=float))
        for name, g in (("gamma_minus", self.gamma_minus),
                        ("gamma_plus_prev", self.gamma_plus_prev)):
            if np.linalg.eigvalsh(g).min() <= 0:
                raise NumericalError(f"{name} is not positive definite")


@dataclass
class BeliefSpec:
    """Messages and precisions for the pair (Z_ell, Z_{ell-1})."""

    layer: object
    r_minus: np.ndarray
    r_plus_prev: np.ndarray
    prec: PrecisionBundle


@dataclass
class DenoiserResult:
    """Joint estimates and the two averaged Jacobians Algorithm needs."""

    zhat_plus: np.ndarray
    zhat_minus: np.ndarray
    jac_plus: np.ndarray
    jac_minus: np.ndarray


@dataclass
class RotatedLinearResult:
    u: np.ndarray         # rotated z_ell rows
    v: np.ndarray         # rotated z_{ell-1} rows
    jac_plus: np.ndarray
    jac_minus: np.ndarray


def _chunks(n, work_per_row, budget=6_000_000):
    size = max(1, int(budget // max(work_per_row, 1)))
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


# ---------------------------------------------------------------------------
# Linear (odd) layers: exact row-wise solves in the SVD-rotated basis.
# ---------------------------------------------------------------------------


def rotated_linear_denoise(s, b, r_minus, r_plus, noise_prec,
                           gamma_minus, gamma_plus, n_out=None, n_in=None):
    """Row-wise joint quadratic solve in the rotated basis.

    Row i couples z_ell[i] and z_{ell-1}[i] through the scalar singular
    value s[i] (zero beyond min(n_out, n_in)).  ``noise_prec`` of None
    means the hard constraint u = s v + b.  Inputs beyond a side's row
    count are ignored for that side.
    """
    s = np.asarray(s, dtype=float)
    n_max = s.shape[0]
    d = gamma_minus.shape[0]
    n_out = n_max if n_out is None else n_out
    n_in = n_max if n_in is None else n_in
    gm, gp = gamma_minus, gamma_plus

    if noise_prec is None:
        # Hard constraint: minimize over v with u = s v + b substituted.
        a = (s**2)[:, None, None] * gm[None, :, :] + gp[None, :, :]
        try:
            cv = np.linalg.inv(a)
        except np.linalg.LinAlgError as exc:
            bad = int(np.argmin(np.linalg.matrix_rank(a)))
            raise NumericalError(
                f"singular rotated system on row {bad}") from exc
        rhs = s[:, None] * ((r_minus - b) @ gm) + r_plus @ gp
        v = np.einsum("ni,nij->nj", rhs, cv)
        u = s[:, None] * v + b
        cov_uu = (s**2)[:, None, None] * cv
        jac_plus = gm @ cov_uu[:n_out].mean(axis=0)
        jac_minus = gp @ cv[:n_in].mean(axis=0)
        return RotatedLinearResult(u, v, sym_pair(jac_plus),
                                   sym_pair(jac_minus))

    npr = noise_prec
    m = np.empty((n_max, 2 * d, 2 * d))
    m[:, :d, :d] = (npr + gm)[None, :, :]
    m[:, :d, d:] = -s[:, None, None] * npr[None, :, :]
    m[:, d:, :d] = m[:, :d, d:]
    m[:, d:, d:] = (s**2)[:, None, None] * npr[None, :, :] + gp[None, :, :]
    rhs = np.empty((n_max, 2 * d))
    nb = b @ npr
    rhs[:, :d] = nb + r_minus @ gm
    rhs[:, d:] = -s[:, None] * nb + r_plus @ gp
    try:
        x = np.linalg.solve(m, rhs[:, :, None])[:, :, 0]
        minv = np.linalg.inv(m)
    except np.linalg.LinAlgError as exc:
        ranks = np.linalg.matrix_rank(m)
        bad = int(np.argmin(ranks))
        raise NumericalError(f"singular rotated system on row {bad}") from exc
    u, v = x[:, :d], x[:, d:]
    jac_plus = gm @ minv[:n_out, :d, :d].mean(axis=0)
    jac_minus = gp @ minv[:n_in, d:, d:].mean(axis=0)
    return RotatedLinearResult(u, v, jac_plus, jac_minus)


def sym_pair(j):
    """Jacobians of exact quadratic solves are products of symmetric
    factors; keep them as computed (callers may not symmetrize)."""
    return j


def linear_denoise(layer, belief):
    """Exact joint MAP=MMSE for a linear layer via its precomputed SVD."""
    sf = layer.svd
    d = belief.r_minus.shape[1]
    n_out, n_in = sf.n_out, sf.n_in
    n_max = max(n_out, n_in)
    if belief.r_minus.shape[0] != n_out or belief.r_plus_prev.shape[0] != n_in:
        raise DimensionError("belief messages do not match the layer dims")

    r_minus_rot = np.zeros((n_max, d))
    r_minus_rot[:n_out] = sf.v_out.T @ belief.r_minus
    r_plus_rot = np.zeros((n_max, d))
    r_plus_rot[:n_in] = sf.v_in @ belief.r_plus_prev
    b_rot = np.zeros((n_max, d))
    b_rot[:n_out] = sf.v_out.T @ layer.bias_full(d)

    res = rotated_linear_denoise(
        sf.padded_singular(n_max), b_rot, r_minus_rot, r_plus_rot,
        layer.noise_prec, belief.prec.gamma_minus, belief.prec.gamma_plus_prev,
        n_out=n_out, n_in=n_in,
    )
    return DenoiserResult(
        zhat_plus=sf.v_out @ res.u[:n_out],
        zhat_minus=sf.v_in.T @ res.v[:n_in],
        jac_plus=res.jac_plus,
        jac_minus=res.jac_minus,
    )


# ---------------------------------------------------------------------------
# Nonlinear (even) layers, MMSE: the Gaussian layer noise is marginalized
# analytically, leaving a d-dimensional integral over the input row that is
# evaluated by Gauss-Hermite or common-random-number Monte-Carlo nodes
# centered on the Gamma+ pseudo-prior.
# ---------------------------------------------------------------------------


def _gaussian_additive_or_raise(layer):
    if getattr(layer, "phi_kind", None) != "gaussian-additive":
        raise NoDensityError(
            "MMSE/MAP denoising needs phi_kind gaussian-additive"
        )


def nonlinear_denoise_mmse(layer, belief, quad=None):
    _gaussian_additive_or_raise(layer)
    quad = quad or QuadratureCfg()
    gm = belief.prec.gamma_minus
    gp = belief.prec.gamma_plus_prev
    r_minus, r_plus = belief.r_minus, belief.r_plus_prev
    n, d = r_plus.shape

    if isinstance(layer.psi, ElementwiseMap) and \
            layer.psi.activation.name == "identity":
        # Jointly Gaussian belief: reuse the exact rotated solver with s = 1.
        noise_prec = inv_psd(layer.noise_cov)
        res = rotated_linear_denoise(
            np.ones(n), np.zeros((n, d)), r_minus, r_plus,
            noise_prec, gm, gp)
        return DenoiserResult(res.u, res.v, res.jac_plus, res.jac_minus)

    gm_inv = inv_psd(gm)
    m_eff = inv_psd(gm_inv + layer.noise_cov)          # residual precision
    blend = np.linalg.solve(layer.noise_cov + gm_inv, layer.noise_cov)
    cov_z_given_u = sym(layer.noise_cov - layer.noise_cov @ blend)

    eps, logw0 = standard_nodes(d, quad)
    root = sqrtm_psd(inv_psd(gp))
    offsets = eps @ root                               # (J, d)
    J = offsets.shape[0]

    zhat_plus = np.empty_like(r_minus)
    zhat_minus = np.empty_like(r_plus)
    sum_cov_u = np.zeros((d, d))
    sum_cov_z = np.zeros((d, d))
    for lo, hi in _chunks(n, J * d):
        u = r_plus[lo:hi, None, :] + offsets[None, :, :]
        psi_u = layer.psi(u.reshape(-1, d)).reshape(hi - lo, J, -1)
        resid = r_minus[lo:hi, None, :] - psi_u
        lw = logw0[None, :] - 0.5 * np.einsum(
            "njc,cb,njb->nj", resid, m_eff, resid)
        lw -= lw.max(axis=1, keepdims=True)
        w = np.exp(lw)
        tot = w.sum(axis=1)
        if not np.all(np.isfinite(tot)) or tot.min() <= 0:
            bad = int(lo + np.argmin(np.where(np.isfinite(tot), tot, -1.0)))
            raise DegenerateBeliefError(bad)
        w /= tot[:, None]
        mu_u = np.einsum("nj,njc->nc", w, u)
        m_z = psi_u + resid @ blend
        mu_z = np.einsum("nj,njc->nc", w, m_z)
        zhat_minus[lo:hi] = mu_u
        zhat_plus[lo:hi] = mu_z
        sum_cov_u += np.einsum("nj,nja,njb->ab", w, u, u) \
            - np.einsum("na,nb->ab", mu_u, mu_u)
        sum_cov_z += np.einsum("nj,nja,njb->ab", w, m_z, m_z) \
            - np.einsum("na,nb->ab", mu_z, mu_z)
    mean_cov_u = sym(sum_cov_u / n)
    mean_cov_z = sym(sum_cov_z / n) + cov_z_given_u
    return DenoiserResult(
        zhat_plus=zhat_plus,
        zhat_minus=zhat_minus,
        jac_plus=gm @ mean_cov_z,
        jac_minus=gp @ mean_cov_u,
    )


# ---------------------------------------------------------------------------
# Nonlinear layers, MAP: damped Newton on the per-row 2d objective; exact
# branch enumeration for piecewise-linear (ReLU-type) activations.
# ---------------------------------------------------------------------------


def _pair_objective(layer, z, u, r_minus, r_plus, gm, gp, noise_prec):
    e = z - layer.psi(u)
    obj = 0.5 * np.einsum("ni,ij,nj->n", e, noise_prec, e)
    dz = z - r_minus
    obj += 0.5 * np.einsum("ni,ij,nj->n", dz, gm, dz)
    du = u - r_plus
    obj += 0.5 * np.einsum("ni,ij,nj->n", du, gp, du)
    return obj


def _pair_grad_hess(layer, z, u, r_minus, r_plus, gm, gp, noise_prec):
    n, d = u.shape
    dz_out = z.shape[1]
    e = z - layer.psi(u)
    es = e @ noise_prec
    jpsi = layer.psi.jacobian(u)                     # (n, d, d_out), row conv
    g = np.empty((n, dz_out + d))
    g[:, :dz_out] = es + (z - r_minus) @ gm
    g[:, dz_out:] = -np.einsum("nij,nj->ni", jpsi, es) + (u - r_plus) @ gp
    h = np.empty((n, dz_out + d, dz_out + d))
    h[:, :dz_out, :dz_out] = (noise_prec + gm)[None]
    cross = -np.einsum("ij,nkj->nik", noise_prec, jpsi)   # -(Sigma^-1 Jpsi^T)
    h[:, :dz_out, dz_out:] = cross
    h[:, dz_out:, :dz_out] = np.swapaxes(cross, 1, 2)
    h[:, dz_out:, dz_out:] = np.einsum("nia,ab,njb->nij", jpsi, noise_prec,
                                       jpsi) + gp[None]
    h[:, dz_out:, dz_out:] += layer.psi.curvature(u, -es)
    return g, h


def _newton_rows(obj_fn, grad_hess_fn, x0, tol, max_iter):
    """Vectorized damped Newton with per-row backtracking."""
    x = x0.copy()
    obj = obj_fn(x)
    for _ in range(max_iter):
        g, h = grad_hess_fn(x)
        gnorm = np.abs(g).max(axis=1)
        active = gnorm > tol
        if not active.any():
            return x, gnorm
        try:
            step = np.linalg.solve(h[active], g[active][:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            h_reg = h[active] + 1e-10 * np.eye(h.shape[1])[None]
            step = np.linalg.solve(h_reg, g[active][:, :, None])[:, :, 0]
        eta = np.ones(step.shape[0])
        base = obj[active]
        xa = x[active]
        new = xa - step
        new_obj = obj_fn_on(obj_fn, x, active, new)
        for _ in range(40):
            worse = ~(new_obj <= base)
            if not worse.any():
                break
            eta[worse] *= 0.5
            new[worse] = xa[worse] - eta[worse][:, None] * step[worse]
            new_obj = obj_fn_on(obj_fn, x, active, new)
        x[active] = new
        obj[active] = new_obj
    g, _ = grad_hess_fn(x)
    gnorm = np.abs(g).max(axis=1)
    if gnorm.max() > tol:
        bad = int(np.argmax(gnorm))
        raise MapNoConvergenceError(bad, float(gnorm.max()))
    return x, gnorm


def obj_fn_on(obj_fn, x, active, candidate):
    trial = x.copy()
    trial[active] = candidate
    return obj_fn(trial)[active]


def nonlinear_denoise_map(layer, belief, opt=None):
    _gaussian_additive_or_raise(layer)
    opt = opt or NewtonCfg()
    gm = belief.prec.gamma_minus
    gp = belief.prec.gamma_plus_prev
    r_minus, r_plus = belief.r_minus, belief.r_plus_prev
    n, d = r_plus.shape
    d_out = r_minus.shape[1]
    noise_prec = inv_psd(layer.noise_cov)

    if getattr(layer.psi, "has_kinks", False) and opt.kink_smooth == 0.0:
        return _map_relu_branches(layer, belief, noise_prec)

    def obj_fn(x):
        return _pair_objective(layer, x[:, :d_out], x[:, d_out:],
                               r_minus, r_plus, gm, gp, noise_prec)

    def gh_fn(x):
        return _pair_grad_hess(layer, x[:, :d_out], x[:, d_out:],
                               r_minus, r_plus, gm, gp, noise_prec)

    x0 = np.concatenate([r_minus, r_plus], axis=1)
    x, _ = _newton_rows(obj_fn, gh_fn, x0, opt.tol, opt.max_iter)
    z, u = x[:, :d_out], x[:, d_out:]
    _, h = gh_fn(x)
    hinv = np.linalg.inv(h)
    jac_plus = gm @ hinv[:, :d_out, :d_out].mean(axis=0)
    jac_minus = gp @ hinv[:, d_out:, d_out:].mean(axis=0)
    return DenoiserResult(z, u, jac_plus, jac_minus)


def _branch_weight(layer):
    """Linear read-out applied after the activation (identity if none)."""
    w = getattr(layer.psi, "weights", None)
    if w is None:
        return np.eye(layer.psi.d_in)
    return w


def _map_relu_branches(layer, belief, noise_prec):
    """Exact MAP for ReLU-type maps: on each activation pattern the
    objective is quadratic, so all 2^d sign branches are solved in closed
    form (with zero-clamped re-solves for boundary rows) and the best
    consistent candidate per row wins."""
    gm = belief.prec.gamma_minus
    gp = belief.prec.gamma_plus_prev
    r_minus, r_plus = belief.r_minus, belief.r_plus_prev
    n, d = r_plus.shape
    d_out = r_minus.shape[1]
    if d > 12:
        raise NoDensityError(
            "exact branch enumeration limited to d <= 12; "
            "set kink_smooth > 0 for larger d"
        )
    wout = _branch_weight(layer)

    best_obj = np.full(n, np.inf)
    best_z = np.zeros((n, d_out))
    best_u = np.zeros((n, d))
    best_h = np.zeros((n, d_out + d, d_out + d))

    rhs = np.concatenate([r_minus @ gm, r_plus @ gp], axis=1)

    for mask_bits in range(2**d):
        pattern = np.array([(mask_bits >> i) & 1 for i in range(d)],
                           dtype=float)
        jlin = pattern[:, None] * wout                      # (d, d_out)
        h = np.empty((d_out + d, d_out + d))
        h[:d_out, :d_out] = noise_prec + gm
        h[:d_out, d_out:] = -(noise_prec @ jlin.T)
        h[d_out:, :d_out] = h[:d_out, d_out:].T
        h[d_out:, d_out:] = jlin @ noise_prec @ jlin.T + gp
        x = np.linalg.solve(h, rhs.T).T
        u = x[:, d_out:]
        ok = np.ones(n, dtype=bool)
        on = pattern > 0
        if on.any():
            ok &= (u[:, on] >= -1e-12).all(axis=1)
        if (~on).any():
            ok &= (u[:, ~on] <= 1e-12).all(axis=1)
        # Boundary fallback: clamp inconsistent coordinates to the kink
        # and re-solve the quadratic over the remaining ones.
        if (~ok).any():
            xb = _clamped_branch_solve(h, rhs[~ok], pattern, d_out, d)
            x[~ok] = xb
        z, u = x[:, :d_out], x[:, d_out:]
        obj = _pair_objective(layer, z, np.where(
            np.broadcast_to(pattern > 0, u.shape), np.maximum(u, 0.0),
            np.minimum(u, 0.0)), r_minus, r_plus, gm, gp, noise_prec)
        better = obj < best_obj
        if better.any():
            best_obj[better] = obj[better]
            best_z[better] = z[better]
            best_u[better] = np.where(pattern[None, :] > 0,
                                      np.maximum(u[better], 0.0),
                                      np.minimum(u[better], 0.0))
            best_h[better] = h[None]
    hinv = np.linalg.inv(best_h)
    jac_plus = gm @ hinv[:, :d_out, :d_out].mean(axis=0)
    jac_minus = gp @ hinv[:, d_out:, d_out:].mean(axis=0)
    return DenoiserResult(best_z, best_u, jac_plus, jac_minus)


def _clamped_branch_solve(h, rhs, pattern, d_out, d):
    """Re-solve the branch quadratic with every u coordinate pinned to 0.

    Pinning all of u is exact for d = 1 boundary rows and a conservative
    candidate otherwise; the pattern loop still evaluates the true
    objective so a suboptimal candidate merely loses the argmin.
    """
    n = rhs.shape[0]
    x = np.zeros((n, d_out + d))
    hz = h[:d_out, :d_out]
    x[:, :d_out] = np.linalg.solve(hz, rhs[:, :d_out].T).T
    return x


# ---------------------------------------------------------------------------
# Endpoint denoisers.
# ---------------------------------------------------------------------------


def input_denoise(prior, r_minus, gamma_minus, mode="mmse"):
    """Posterior mean/mode of the input rows under prior x N(r, Gamma^-1)."""
    r_minus = np.atleast_2d(r_minus)
    if mode == "mmse":
        mean, covs = prior.mmse_denoise(r_minus, gamma_minus)
    elif mode == "map":
        mean, covs = prior.map_denoise(r_minus, gamma_minus)
    else:
        raise ValueError(f"mode must be 'map' or 'mmse', got {mode!r}")
    jac = gamma_minus @ covs.mean(axis=0)
    return mean, jac


def _identity_output(layer):
    return isinstance(layer.psi, ElementwiseMap) and \
        layer.psi.activation.name == "identity"


def output_denoise(layer, y, r_plus, gamma_plus, mode="mmse",
                   quad=None, opt=None):
    """Estimate Z_{L-1} rows with the observed output rows pinned."""
    y = np.atleast_2d(y)
    r_plus = np.atleast_2d(r_plus)
    gp = sym(gamma_plus)
    n, d = r_plus.shape

    if getattr(layer, "phi_kind", None) == "gaussian-additive" \
            and _identity_output(layer):
        # Conjugate blend, valid down to exactly zero output noise.
        gp_inv = inv_psd(gp)
        gain = np.linalg.solve(layer.noise_cov + gp_inv, gp_inv)
        zhat = r_plus + (y - r_plus) @ gain
        cov = sym(gp_inv - gp_inv @ gain)
        jac = gp @ cov
        return zhat, jac

    if mode == "mmse":
        quad = quad or QuadratureCfg()
        eps, logw0 = standard_nodes(d, quad)
        root = sqrtm_psd(inv_psd(gp))
        offsets = eps @ root
        J = offsets.shape[0]
        zhat = np.empty_like(r_plus)
        sum_cov = np.zeros((d, d))
        for lo, hi in _chunks(n, J * d):
            u = r_plus[lo:hi, None, :] + offsets[None, :, :]
            lw = logw0[None, :] + layer.output_loglik(y[lo:hi, None, :], u)
            lw -= lw.max(axis=1, keepdims=True)
            w = np.exp(lw)
            tot = w.sum(axis=1)
            if not np.all(np.isfinite(tot)) or tot.min() <= 0:
                bad = int(lo + np.argmin(np.where(np.isfinite(tot), tot, -1.0)))
                raise DegenerateBeliefError(bad)
            w /= tot[:, None]
            mu = np.einsum("nj,njc->nc", w, u)
            zhat[lo:hi] = mu
            sum_cov += np.einsum("nj,nja,njb->ab", w, u, u) \
                - np.einsum("na,nb->ab", mu, mu)
        jac = gp @ sym(sum_cov / n)
        return zhat, jac

    if mode == "map":
        return _output_denoise_map(layer, y, r_plus, gp, opt or NewtonCfg())
    raise ValueError(f"mode must be 'map' or 'mmse', got {mode!r}")


def _output_denoise_map(layer, y, r_plus, gp, opt):
    _gaussian_additive_or_raise(layer)
    noise_prec = inv_psd(layer.noise_cov)
    n, d = r_plus.shape

    if getattr(layer.psi, "has_kinks", False) and opt.kink_smooth == 0.0:
        # Pin z to y and enumerate ReLU branches on u alone via the pair
        # solver with a huge z-side precision is wasteful; reuse the
        # branch machinery with the observation folded into the residual.
        big = PrecisionBundle(1e14 * np.eye(y.shape[1]), gp)
        res = _map_relu_branches(
            layer, BeliefSpec(layer, y, r_plus, big), noise_prec)
        return res.zhat_minus, res.jac_minus

    def obj_fn(u):
        e = layer.psi(u) - y
        obj = 0.5 * np.einsum("ni,ij,nj->n", e, noise_prec, e)
        du = u - r_plus
        return obj + 0.5 * np.einsum("ni,ij,nj->n", du, gp, du)

    def gh_fn(u):
        e = layer.psi(u) - y
        es = e @ noise_prec
        jpsi = layer.psi.jacobian(u)
        g = np.einsum("nij,nj->ni", jpsi, es) + (u - r_plus) @ gp
        h = np.einsum("nia,ab,njb->nij", jpsi, noise_prec, jpsi) + gp[None]
        h += layer.psi.curvature(u, es)
        return g, h

    u, _ = _newton_rows(obj_fn, gh_fn, r_plus.copy(), opt.tol, opt.max_iter)
    _, h = gh_fn(u)
    hinv = np.linalg.inv(h)
    jac = gp @ hinv.mean(axis=0)
    return u, jac


# ---------------------------------------------------------------------------
# Finite-difference validation of averaged Jacobians.
# ---------------------------------------------------------------------------


@dataclass
class JacobianCheckReport:
    max_abs_dev: float
    fd_jac: np.ndarray
    analytic_jac: np.ndarray
    tol: float

    @property
    def passed(self):
        return self.max_abs_dev <= self.tol


def jacobian_check(fn, r, analytic_jac, tol=1e-6, step_scale=None):
    """Central finite differences of the averaged Jacobian <dG/dR>.

    ``fn`` maps the full message matrix to the output matrix; each row is
    probed separately so the check is exact for non-row-wise denoisers
    as well.  Step is cbrt(machine eps) times a per-column scale.
    """
    r = np.atleast_2d(np.asarray(r, dtype=float))
    n, d = r.shape
    scale = step_scale or max(1.0, float(np.abs(r).max()))
    h = np.cbrt(np.finfo(float).eps) * scale
    d_out = np.atleast_2d(fn(r)).shape[1]
    fd = np.zeros((d, d_out))
    for i in range(n):
        for j in range(d):
            rp = r.copy()
            rp[i, j] += h
            rm = r.copy()
            rm[i, j] -= h
            fd[j] += (np.atleast_2d(fn(rp))[i] - np.atleast_2d(fn(rm))[i]) \
                / (2 * h)
    fd /= n
    dev = float(np.abs(fd - analytic_jac).max())
    return JacobianCheckReport(dev, fd, np.asarray(analytic_jac), tol)


# ---------------------------------------------------------------------------
# Denoiser suite: one block per estimation problem, shared by the
# algorithm engine and the state-evolution runner.
# ---------------------------------------------------------------------------


class InputBlock:
    def __init__(self, prior, mode, map_penalty=None):
        self.prior = prior
        self.mode = mode
        self.map_penalty = map_penalty

    def denoise(self, r_minus, gamma_minus):
        prior = self.prior
        if self.mode == "map" and self.map_penalty is not None:
            prior = self.map_penalty
        return input_denoise(prior, r_minus, gamma_minus, self.mode)


class LinearBlock:
    def __init__(self, layer):
        self.layer = layer

    def denoise(self, belief):
        return linear_denoise(self.layer, belief)

    def denoise_rotated(self, s, b, r_minus, r_plus, prec,
                        n_out=None, n_in=None):
        return rotated_linear_denoise(
            s, b, r_minus, r_plus, self.layer.noise_prec,
            prec.gamma_minus, prec.gamma_plus_prev, n_out=n_out, n_in=n_in)


class NonlinearBlock:
    def __init__(self, layer, mode, quad, newton):
        self.layer = layer
        self.mode = mode
        self.quad = quad
        self.newton = newton

    def denoise(self, belief):
        if self.mode == "mmse":
            return nonlinear_denoise_mmse(self.layer, belief, self.quad)
        return nonlinear_denoise_map(self.layer, belief, self.newton)


class OutputBlock:
    def __init__(self, layer, mode, quad, newton):
        self.layer = layer
        self.mode = mode
        self.quad = quad
        self.newton = newton

    def denoise(self, r_plus, gamma_plus, y):
        return output_denoise(self.layer, y, r_plus, gamma_plus,
                              mode=self.mode, quad=self.quad, opt=self.newton)


class DenoiserSuite:
    """Estimation functions for every block of a model, MAP or MMSE.

    The same block objects evaluate the row-wise maps inside the
    state-evolution runner, so the algorithm and its predictor cannot
    drift apart.
    """

    def __init__(self, model, mode="mmse", quad=None, newton=None,
                 map_penalty=None):
        if mode not in ("map", "mmse"):
            raise ValueError("mode must be 'map' or 'mmse'")
        self.model = model
        self.mode = mode
        self.quad = quad or QuadratureCfg()
        self.newton = newton or NewtonCfg()
        self.input_block = InputBlock(model.input_prior, mode, map_penalty)
        self.pair_blocks = []
        for p, layer in enumerate(model.layers[:-1]):
            if layer.kind == "linear":
                self.pair_blocks.append(LinearBlock(layer))
            else:
                self.pair_blocks.append(
                    NonlinearBlock(layer, mode, self.quad, self.newton))
        self.output_block = OutputBlock(model.layers[-1], mode, self.quad,
                                        self.newton)

    def block(self, ell):
        """Denoiser for network layer ell in 1..L-1 (pair blocks)."""
        return self.pair_blocks[ell - 1]
