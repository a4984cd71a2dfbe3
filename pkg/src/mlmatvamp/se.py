"""Deterministic state-evolution recursion, evaluated by Monte-Carlo.

The recursion tracks d-dimensional random rows per layer: the rotated
truth/error pairs (Q0, Q-) entering each block from above and (P0, P+)
from below.  Every expectation is an average over an M-row ensemble, and
the row-wise maps are evaluated by the same denoiser blocks the
algorithm engine uses, applied to the synthetic inputs Q- + Q0 and
P+ + P0.

Non-square linear layers make the two sides of a block live on different
rotated row populations (the zero-padded singular values).  Each sample
row draws a rotated row index; samples are sorted by that index so the
output-side population is a prefix of length m_q and the input side a
prefix of length m_p, which the rotated solver consumes directly.

Covariances are non-central second moments throughout: the Haar rotation
makes the limiting rows zero-mean, and the test-error covariance of the
application is defined the same way.
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .denoisers import BeliefSpec, DenoiserSuite, PrecisionBundle
from .errors import (
    InvalidCovarianceError,
    MlMatVampError,
    NotComputedError,
)
from .linalg import (
    DEFAULT_CAP,
    DEFAULT_FLOOR,
    psd_regularize,
    sample_rows_gaussian,
    sym,
)
from .rng import derive_rng

__all__ = [
    "SeOptions",
    "SeHistory",
    "se_initial_pass",
    "se_run",
    "layer_second_moments",
    "predict_layer_mse",
    "predict_test_error",
    "se_history_to_csv",
    "se_history_to_json",
]

_PROBE_SEED = 1351

@dataclass
class SeOptions:
    samples: int = 50000
    n_iter: int = 20
    seed: int = 0
    mode: str = "mmse"
    floor: float = DEFAULT_FLOOR
    cap: float = DEFAULT_CAP
    initial_gamma_minus: list = None
    initial_tau_minus: list = None
    keep_error_ensembles: bool = True


@dataclass
class SeIteration:
    k: int
    tau_minus: list            # consumed at this iteration, per layer
    tau_minus_se: list
    gamma_bar_minus: list      # consumed
    gamma_bar_plus: list       # produced by the forward pass
    lambda_bar_plus: list
    lambda_bar_minus: list
    k_plus: list               # 2d x 2d per layer
    k_plus_se: list
    mse_plus: list             # scalar per layer (identity weight)
    mse_plus_se: list
    k_test: np.ndarray         # second moment of [Q0_0, Qhat+_0]
    k_test_se: np.ndarray
    cross_pq: list             # E[P+^T Q-] per layer (None at layer 0)
    cross_pq_se: list
    cross_p0q: list
    cross_p0q_se: list
    errors_plus: list = None   # per-layer (m_q, d) ensembles of Qhat+ - Q0


@dataclass
class SeHistory:
    model: object
    options: object
    tau0: list = None
    iterations: list = field(default_factory=list)
    safeguard_events: int = 0

    def k_plus(self, k, ell):
        return self.iterations[k].k_plus[ell]

    def tau_minus(self, k, ell):
        return self.iterations[k].tau_minus[ell]


def _second_moment(x, m=None):
    m = x.shape[0] if m is None else m
    x = x[:m]
    cov = sym(x.T @ x / m)
    sq = x**2
    se = np.sqrt(np.maximum(sq.T @ sq / m - cov**2, 0.0) / m)
    return cov, se


def _cross_moment(a, b, m):
    a, b = a[:m], b[:m]
    cov = a.T @ b / m
    se = np.sqrt(np.maximum((a**2).T @ (b**2) / m - cov**2, 0.0) / m)
    return cov, se


class _LayerDraw:
    """Frozen per-layer randomness shared by all iterations (CRN)."""

    def __init__(self, model, p, n_samples, seed):
        layer = model.layers[p]
        self.layer = layer
        if layer.kind == "linear":
            n_out, n_in = layer.n_out, layer.n_in
            n_max = max(n_out, n_in)
            rng = derive_rng(seed, "se-linear", p)
            idx = np.sort(rng.integers(0, n_max, size=n_samples))
            self.s = layer.svd.padded_singular(n_max)[idx]
            self.m_q = int(np.searchsorted(idx, n_out))
            self.m_p = int(np.searchsorted(idx, n_in))
            b_rot = layer.svd.v_out.T @ layer.bias_full(model.d)
            self.b = np.zeros((n_samples, model.d))
            valid = idx < n_out
            self.b[valid] = b_rot[idx[valid]]
            if layer.noise_prec is None:
                self.xi = np.zeros((n_samples, model.d))
            else:
                self.xi = sample_rows_gaussian(
                    n_samples, layer.noise_cov(), derive_rng(seed, "se-xi", p))
        else:
            self.m_q = self.m_p = n_samples
            self.xi = layer.sample_noise(n_samples, derive_rng(seed, "se-xi", p))

    def q0(self, p0_prev):
        """Rotated truth rows for this layer given the previous P0 rows."""
        if self.layer.kind == "linear":
            return self.s[:, None] * p0_prev + self.b + self.xi
        return self.layer.apply(p0_prev, self.xi)


def se_initial_pass(model, n_samples, seed, draws=None):
    """Propagate the row-wise limit model forward once.

    Returns (draws, w0, p0 list, tau0 list) where tau0 has one d x d
    second moment per layer 0..L-1.
    """
    L = model.L
    draws = draws or [_LayerDraw(model, p, n_samples, seed)
                      for p in range(L)]
    w0 = model.input_prior.sample(n_samples, derive_rng(seed, "se-prior"))
    tau0 = [_second_moment(w0)[0]]
    p0 = [sample_rows_gaussian(n_samples, tau0[0],
                               derive_rng(seed, "se-p0", 0))]
    for ell in range(1, L):
        q0 = draws[ell - 1].q0(p0[-1])
        t, _ = _second_moment(q0, draws[ell - 1].m_q)
        tau0.append(t)
        p0.append(sample_rows_gaussian(n_samples, t,
                                       derive_rng(seed, "se-p0", ell)))
    return draws, w0, p0, tau0


def layer_second_moments(model, n_samples=4096, seed=_PROBE_SEED):
    """Cheap deterministic estimate of each layer's row second moment."""
    _, _, _, tau0 = se_initial_pass(model, n_samples, seed)
    return tau0


def _right_solve(numer, mat):
    """numer @ mat^{-1} for symmetric mat."""
    return np.linalg.solve(mat.T, numer.T).T


class _Guard:
    def __init__(self, floor, cap):
        self.floor = floor
        self.cap = cap
        self.events = 0

    def __call__(self, m):
        m = sym(m)
        w = np.linalg.eigvalsh(m)
        if w.min() >= self.floor and w.max() <= self.cap:
            return m
        self.events += 1
        return psd_regularize(m, self.floor, self.cap)


def se_run(model, opts=None, suite=None):
    """Run the full recursion and record every deterministic quantity."""
    opts = opts or SeOptions()
    suite = suite or DenoiserSuite(model, mode=opts.mode)
    L, d = model.L, model.d
    M = opts.samples
    guard = _Guard(opts.floor, opts.cap)

    draws, w0, p0, tau0 = se_initial_pass(model, M, opts.seed)
    m_q = [M] + [draws[p].m_q for p in range(L - 1)]
    m_p = [draws[p].m_p for p in range(L)]

    if opts.initial_gamma_minus is not None:
        gamma_minus = [g.copy() for g in opts.initial_gamma_minus]
    else:
        from .engine import default_initial_gamma

        gamma_minus = default_initial_gamma(model)
    tau_minus = ([t.copy() for t in opts.initial_tau_minus]
                 if opts.initial_tau_minus is not None
                 else [t.copy() for t in tau0[:L]])
    tau_minus_se = [np.zeros((d, d)) for _ in range(L)]

    q_minus = [sample_rows_gaussian(M, tau_minus[ell],
                                    derive_rng(opts.seed, "se-qminus", 0, ell))
               for ell in range(L)]
    q0 = [w0] + [None] * (L - 1)
    p_plus = [None] * L
    gamma_plus = [None] * L
    lambda_plus = [None] * L
    lambda_minus = [None] * L

    history = SeHistory(model=model, options=opts, tau0=tau0)

    for k in range(opts.n_iter):
        gm_consumed = [g.copy() for g in gamma_minus]
        tau_consumed = [t.copy() for t in tau_minus]
        tau_se_consumed = [t.copy() for t in tau_minus_se]
        k_plus = [None] * L
        k_plus_se = [None] * L
        mse = [None] * L
        mse_se = [None] * L
        errors = [None] * L if opts.keep_error_ensembles else None
        cross_pq = [None] * L
        cross_pq_se = [None] * L
        cross_p0q = [None] * L
        cross_p0q_se = [None] * L

        # Forward pass.
        for ell in range(L):
            if ell == 0:
                h_plus, jac = suite.input_block.denoise(
                    q_minus[0] + w0, gamma_minus[0])
                base0, base_plus = w0, None
            else:
                q0[ell] = draws[ell - 1].q0(p0[ell - 1])
                prec = PrecisionBundle(gamma_minus[ell], gamma_plus[ell - 1])
                r_minus_syn = q_minus[ell] + q0[ell]
                r_plus_syn = p_plus[ell - 1] + p0[ell - 1]
                block = suite.block(ell)
                if model.layer(ell).kind == "linear":
                    res = block.denoise_rotated(
                        draws[ell - 1].s, draws[ell - 1].b,
                        r_minus_syn, r_plus_syn, prec,
                        n_out=m_q[ell], n_in=m_p[ell - 1])
                    h_plus, jac = res.u, res.jac_plus
                else:
                    res = block.denoise(BeliefSpec(
                        model.layer(ell), r_minus_syn, r_plus_syn, prec))
                    h_plus, jac = res.zhat_plus, res.jac_plus
                base0 = q0[ell]
                mc = min(m_q[ell], m_p[ell - 1])
                cross_pq[ell], cross_pq_se[ell] = _cross_moment(
                    p_plus[ell - 1], q_minus[ell], mc)
                cross_p0q[ell], cross_p0q_se[ell] = _cross_moment(
                    p0[ell - 1], q_minus[ell], mc)
            lam = guard(np.linalg.solve(jac, gamma_minus[ell]))
            gp_new = guard(lam - gamma_minus[ell])
            lambda_plus[ell] = lam
            gamma_plus[ell] = gp_new
            q_plus = _right_solve(
                (h_plus - base0) @ lam - q_minus[ell] @ gamma_minus[ell],
                gp_new)
            joint = np.concatenate([base0, q_plus], axis=1)
            k_plus[ell], k_plus_se[ell] = _second_moment(joint, m_q[ell])
            err = (h_plus - base0)[: m_q[ell]]
            per_row = np.einsum("ni,ni->n", err, err)
            mse[ell] = float(per_row.mean())
            mse_se[ell] = float(per_row.std(ddof=1) / np.sqrt(len(per_row)))
            if errors is not None:
                errors[ell] = err.copy()
            if ell == 0:
                k_test, k_test_se = _second_moment(
                    np.concatenate([w0, h_plus], axis=1))
            fresh = sample_rows_gaussian(
                M, k_plus[ell], derive_rng(opts.seed, "se-pfresh", k, ell))
            p0[ell], p_plus[ell] = fresh[:, :d], fresh[:, d:]

        # Backward pass.
        for ell in range(L, 0, -1):
            tgt = ell - 1
            if ell == L:
                y_syn = draws[L - 1].q0(p0[L - 1])
                h_minus, jac = suite.output_block.denoise(
                    p_plus[L - 1] + p0[L - 1], gamma_plus[L - 1], y_syn)
            else:
                prec = PrecisionBundle(gamma_minus[ell], gamma_plus[tgt])
                r_minus_syn = q_minus[ell] + q0[ell]
                r_plus_syn = p_plus[tgt] + p0[tgt]
                block = suite.block(ell)
                if model.layer(ell).kind == "linear":
                    res = block.denoise_rotated(
                        draws[ell - 1].s, draws[ell - 1].b,
                        r_minus_syn, r_plus_syn, prec,
                        n_out=m_q[ell], n_in=m_p[tgt])
                    h_minus, jac = res.v, res.jac_minus
                else:
                    res = block.denoise(BeliefSpec(
                        model.layer(ell), r_minus_syn, r_plus_syn, prec))
                    h_minus, jac = res.zhat_minus, res.jac_minus
            lam = guard(np.linalg.solve(jac, gamma_plus[tgt]))
            gm_new = guard(lam - gamma_plus[tgt])
            lambda_minus[tgt] = lam
            gamma_minus[tgt] = gm_new
            p_minus = _right_solve(
                (h_minus - p0[tgt]) @ lam - p_plus[tgt] @ gamma_plus[tgt],
                gm_new)
            tau_minus[tgt], tau_minus_se[tgt] = _second_moment(
                p_minus, m_p[tgt])
            q_minus[tgt] = sample_rows_gaussian(
                M, tau_minus[tgt], derive_rng(opts.seed, "se-qminus",
                                              k + 1, tgt))

        history.iterations.append(SeIteration(
            k=k,
            tau_minus=tau_consumed,
            tau_minus_se=tau_se_consumed,
            gamma_bar_minus=gm_consumed,
            gamma_bar_plus=[g.copy() for g in gamma_plus],
            lambda_bar_plus=[g.copy() for g in lambda_plus],
            lambda_bar_minus=[g.copy() for g in lambda_minus],
            k_plus=k_plus,
            k_plus_se=k_plus_se,
            mse_plus=mse,
            mse_plus_se=mse_se,
            k_test=k_test,
            k_test_se=k_test_se,
            cross_pq=cross_pq,
            cross_pq_se=cross_pq_se,
            cross_p0q=cross_p0q,
            cross_p0q_se=cross_p0q_se,
            errors_plus=errors,
        ))
    history.safeguard_events = guard.events
    return history


def predict_layer_mse(history, ell, k, weight=None):
    """Monte-Carlo estimate of the SE-predicted weighted MSE of Zhat+.

    Returns (value, standard error) for E ||Qhat+ - Q0||^2_H.
    """
    try:
        rec = history.iterations[k]
    except IndexError:
        raise NotComputedError(f"iteration {k} was not run") from None
    if rec.errors_plus is None:
        raise NotComputedError("error ensembles were not kept")
    err = rec.errors_plus[ell]
    if err is None:
        raise NotComputedError(f"no ensemble for layer {ell}")
    h = np.eye(err.shape[1]) if weight is None else np.asarray(weight)
    per_row = np.einsum("ni,ij,nj->n", err, h, err)
    return float(per_row.mean()), \
        float(per_row.std(ddof=1) / np.sqrt(len(per_row)))


def predict_test_error(k_cov, f2, activation, n_mc=100000, rng=None):
    """E |f2^T (sigma(z) - sigma(zhat))|^2 over (z, zhat) ~ N(0, k_cov).

    ``k_cov`` is the 2d x 2d row covariance of [truth, estimate];
    returns (value, Monte-Carlo standard error).
    """
    k_cov = sym(np.asarray(k_cov, dtype=float))
    if np.linalg.eigvalsh(k_cov).min() < -1e-10 * max(
            1.0, np.abs(k_cov).max()):
        raise InvalidCovarianceError("test covariance is not PSD")
    d2 = k_cov.shape[0]
    if d2 % 2:
        raise MlMatVampError("test covariance must be 2d x 2d")
    d = d2 // 2
    rng = rng or derive_rng(0, "test-error-mc")
    f2 = np.atleast_1d(np.asarray(f2, dtype=float))
    if f2.ndim == 1:
        f2 = f2[:, None]
    x = sample_rows_gaussian(n_mc, k_cov, rng)
    diff = (activation(x[:, :d]) - activation(x[:, d:])) @ f2
    per_row = np.einsum("ni,ni->n", diff, diff)
    return float(per_row.mean()), \
        float(per_row.std(ddof=1) / np.sqrt(n_mc))


def se_history_to_csv(history):
    """Columns (k, layer, quantity, i, j, value, stderr)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k", "layer", "quantity", "i", "j", "value", "stderr"])

    def emit(k, ell, name, mat, se=None):
        mat = np.atleast_2d(mat)
        for i in range(mat.shape[0]):
            for j in range(mat.shape[1]):
                s = "" if se is None else repr(float(np.atleast_2d(se)[i, j]))
                writer.writerow([k, ell, name, i, j, repr(float(mat[i, j])), s])

    for rec in history.iterations:
        for ell in range(history.model.L):
            emit(rec.k, ell, "tau_minus", rec.tau_minus[ell],
                 rec.tau_minus_se[ell])
            emit(rec.k, ell, "k_plus", rec.k_plus[ell], rec.k_plus_se[ell])
            emit(rec.k, ell, "gamma_bar_minus", rec.gamma_bar_minus[ell])
            emit(rec.k, ell, "gamma_bar_plus", rec.gamma_bar_plus[ell])
            emit(rec.k, ell, "lambda_bar_plus", rec.lambda_bar_plus[ell])
            emit(rec.k, ell, "lambda_bar_minus", rec.lambda_bar_minus[ell])
            writer.writerow([rec.k, ell, "mse_plus", 0, 0,
                             repr(rec.mse_plus[ell]),
                             repr(rec.mse_plus_se[ell])])
        emit(rec.k, 0, "k_test", rec.k_test, rec.k_test_se)
    return buf.getvalue()


def se_history_to_json(history):
    out = {"tau0": [t.tolist() for t in history.tau0],
           "safeguard_events": history.safeguard_events,
           "iterations": []}
    for rec in history.iterations:
        out["iterations"].append({
            "k": rec.k,
            "tau_minus": [t.tolist() for t in rec.tau_minus],
            "k_plus": [t.tolist() for t in rec.k_plus],
            "gamma_bar_minus": [t.tolist() for t in rec.gamma_bar_minus],
            "gamma_bar_plus": [t.tolist() for t in rec.gamma_bar_plus],
            "mse_plus": rec.mse_plus,
            "mse_plus_se": rec.mse_plus_se,
            "k_test": rec.k_test.tolist(),
        })
    return json.dumps(out, sort_keys=True)
