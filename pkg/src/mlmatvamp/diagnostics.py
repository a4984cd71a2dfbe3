"""Statistical checks of the limit theory at finite size: rotated error
covariances against their deterministic targets, independence of errors
from the layer randomness, and Gaussianity moment tests.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidPairingError
from .linalg import sqrtm_psd, sym
from .rng import derive_rng

__all__ = [
    "TransformedErrors",
    "GaussianityCell",
    "GaussianityReport",
    "compute_transformed_errors",
    "gaussianity_report",
    "wasserstein2_proxy",
]


@dataclass
class TransformedErrors:
    """Rotated message errors aligned with the SE row variables.

    q_minus[(k, ell)]: errors of the messages entering block ell from
    above at iteration k; p_plus[(k, ell)]: errors of the messages
    leaving layer ell upward.  Odd layers carry the left singular
    rotation on the minus side and even layers the right rotation on the
    plus side, matching the transformed-error definitions used by the
    analysis.
    """

    q_minus: dict = field(default_factory=dict)
    p_plus: dict = field(default_factory=dict)
    p_zero: dict = field(default_factory=dict)
    w_components: dict = field(default_factory=dict)
    iterations: list = field(default_factory=list)
    n_layers: int = 0


def _rotations(model, ell):
    """(minus-side rotation, plus-side rotation) for layer ell.

    Odd ell: q uses V_ell^T (left factor of W_ell), p is unrotated.
    Even ell: q is unrotated, p uses V_ell (right factor of W_{ell+1}).
    """
    if ell % 2 == 1:
        v = model.layer(ell).svd.v_out
        return v.T, None
    v_in = model.layer(ell + 1).svd.v_in
    return None, v_in


def compute_transformed_errors(trace, signals, model, iterations=None):
    """Rotate message errors from a recorded run into SE coordinates."""
    if trace.model is not model and trace.model is not None:
        model = trace.model
    L = model.L
    dims = model.dims
    for ell in range(L):
        if signals.z[ell].shape[0] != dims[ell]:
            raise InvalidPairingError(
                f"signals layer {ell} has {signals.z[ell].shape[0]} rows, "
                f"model expects {dims[ell]}")
    iterations = list(range(trace.n_iter)) if iterations is None else iterations
    errs = TransformedErrors(n_layers=L, iterations=list(iterations))
    for ell in range(L):
        rot_q, rot_p = _rotations(model, ell)
        errs.p_zero[ell] = signals.z[ell] if rot_p is None \
            else rot_p @ signals.z[ell]
        comps = {}
        if ell % 2 == 1:
            layer = model.layer(ell)
            n_max = max(layer.n_out, layer.n_in)
            comps["s"] = layer.svd.padded_singular(n_max)[:layer.n_out, None]
            comps["b"] = layer.svd.v_out.T @ layer.bias_full(model.d)
            if layer.noise_prec is not None:
                comps["xi"] = layer.svd.v_out.T @ signals.xi[ell - 1]
        else:
            nxt = model.layer(ell + 1)
            if nxt.kind == "nonlinear":
                comps["xi"] = signals.xi[ell]
        errs.w_components[ell] = comps
        for k in iterations:
            rec = trace.records[k]
            if rec.r_minus is None or rec.r_plus is None:
                raise InvalidPairingError(
                    "trace was recorded without messages "
                    "(set keep_messages=True)")
            dq = rec.r_minus[ell] - signals.z[ell]
            dp = rec.r_plus[ell] - signals.z[ell]
            errs.q_minus[(k, ell)] = dq if rot_q is None else rot_q @ dq
            errs.p_plus[(k, ell)] = dp if rot_p is None else rot_p @ dp
    return errs


@dataclass
class GaussianityCell:
    k: int
    ell: int
    family: str
    max_std_dev: float
    band: float

    @property
    def passed(self):
        return self.max_std_dev <= self.band


@dataclass
class GaussianityReport:
    cells: list
    band: float

    def pass_rate(self, families=None):
        cells = [c for c in self.cells
                 if families is None or c.family in families]
        if not cells:
            return float("nan")
        return sum(c.passed for c in cells) / len(cells)

    def failures(self):
        return [c for c in self.cells if not c.passed]

    def summary_text(self):
        lines = [f"{'k':>3} {'layer':>5} {'family':<16} "
                 f"{'max|dev|/se':>12} {'band':>6} verdict"]
        for c in self.cells:
            lines.append(
                f"{c.k:>3} {c.ell:>5} {c.family:<16} "
                f"{c.max_std_dev:>12.3f} {c.band:>6.1f} "
                f"{'pass' if c.passed else 'FAIL'}")
        lines.append(f"overall pass rate: {self.pass_rate():.3f}")
        return "\n".join(lines)

    def to_json(self):
        return json.dumps({
            "band": self.band,
            "pass_rate": self.pass_rate(),
            "cells": [{"k": c.k, "ell": c.ell, "family": c.family,
                       "max_std_dev": c.max_std_dev, "band": c.band,
                       "passed": bool(c.passed)} for c in self.cells],
        }, sort_keys=True)


def _cov_vs_target(x, target, target_se):
    n = x.shape[0]
    emp = x.T @ x / n
    prod_var = (x**2).T @ (x**2) / n - emp**2
    emp_se = np.sqrt(np.maximum(prod_var, 0.0) / n)
    comb = np.sqrt(emp_se**2 + np.asarray(target_se) ** 2)
    comb = np.maximum(comb, 1e-300)
    return float(np.abs((emp - target) / comb).max())


def _cross_null(a, b):
    n = min(a.shape[0], b.shape[0])
    a, b = a[:n], b[:n]
    cross = a.T @ b / n
    se = np.sqrt(np.maximum((a**2).T @ (b**2) / n - cross**2, 0.0) / n)
    se = np.maximum(se, 1e-300)
    return float(np.abs(cross / se).max())


def _excess_kurtosis_dev(x):
    n = x.shape[0]
    mu = x.mean(axis=0)
    var = x.var(axis=0)
    m4 = ((x - mu) ** 4).mean(axis=0)
    excess = m4 / np.maximum(var**2, 1e-300) - 3.0
    band_unit = np.sqrt(24.0 / n)
    return float(np.abs(excess).max() / band_unit)


def gaussianity_report(errs, se_history, band=5.0):
    """Compare transformed errors against the SE targets cell by cell.

    Families per (k, layer): covariance of q- against tau-, covariance of
    [p0, p+] against K+, cross-correlation of q- with the previous p+,
    cross-correlation of q- with the layer randomness, and per-coordinate
    excess kurtosis of q-.
    """
    cells = []
    for k in errs.iterations:
        if k >= len(se_history.iterations):
            continue
        rec = se_history.iterations[k]
        for ell in range(errs.n_layers):
            q = errs.q_minus[(k, ell)]
            dev = _cov_vs_target(q, rec.tau_minus[ell], rec.tau_minus_se[ell])
            cells.append(GaussianityCell(k, ell, "q_cov_vs_tau", dev, band))
            joint = np.concatenate([
                errs.p_zero[ell][: errs.p_plus[(k, ell)].shape[0]],
                errs.p_plus[(k, ell)]], axis=1)
            dev = _cov_vs_target(joint, rec.k_plus[ell], rec.k_plus_se[ell])
            cells.append(GaussianityCell(k, ell, "p_cov_vs_kplus", dev, band))
            if ell >= 1:
                dev = _cross_null(errs.p_plus[(k, ell - 1)], q)
                cells.append(GaussianityCell(k, ell, "q_cross_p_plus",
                                             dev, band))
            w_dev = 0.0
            for comp in errs.w_components[ell].values():
                n = min(comp.shape[0], q.shape[0])
                w_dev = max(w_dev, _cross_null(comp[:n], q[:n]))
            if errs.w_components[ell]:
                cells.append(GaussianityCell(k, ell, "q_cross_w", w_dev, band))
            cells.append(GaussianityCell(k, ell, "q_kurtosis",
                                         _excess_kurtosis_dev(q), band))
    return GaussianityReport(cells=cells, band=band)


def wasserstein2_proxy(a, b_sampler, moments_only=True, rng=None,
                       n_reference=None):
    """Distance between an empirical row sample and a reference law.

    moments_only: Gaussian-equivalent (Bures) W2 from first and second
    moments.  Full mode (d = 1 only): exact W2 of the sorted empirical
    coupling against an equal-size reference sample.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.ndim == 2 and a.shape[1] > a.shape[0] and a.shape[0] == 1:
        a = a.T
    n, d = a.shape
    if n < 100:
        raise DimensionError("wasserstein2_proxy needs at least 100 rows")
    rng = rng or derive_rng(0, "w2-reference")
    m = n_reference or max(n, 10000)
    b = np.atleast_2d(np.asarray(b_sampler(m, rng), dtype=float))
    if b.shape[0] == 1 and b.shape[1] > 1 and d == 1:
        b = b.T
    if moments_only:
        mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
        ca = np.cov(a, rowvar=False).reshape(d, d)
        cb = np.cov(b, rowvar=False).reshape(d, d)
        ra = sqrtm_psd(ca)
        inner = sqrtm_psd(sym(ra @ cb @ ra))
        w2sq = float(np.sum((mu_a - mu_b) ** 2)
                     + np.trace(ca + cb - 2.0 * inner))
        return float(np.sqrt(max(w2sq, 0.0)))
    if d != 1:
        raise DimensionError("full W2 mode supports d = 1 only")
    bs = np.sort(b[:, 0])
    qs = np.quantile(bs, (np.arange(n) + 0.5) / n)
    return float(np.sqrt(np.mean((np.sort(a[:, 0]) - qs) ** 2)))
