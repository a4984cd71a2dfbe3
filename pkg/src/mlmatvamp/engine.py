"""Forward/backward message-passing engine over the layer stack.

One iteration runs the forward pass over blocks 0..L-1 updating the
plus-side quantities, then the backward pass over blocks L..1 updating
the minus side.  The printed backward recursion has inconsistent layer
subscripts; the implementation mirrors the forward pass exactly, so the
block for layer ell always updates layer ell-1's minus-side state:

    Lambda-_{ell-1} = <dG-_ell/dR+_{ell-1}>^{-1} Gamma+_{ell-1}
    Gamma-_{ell-1}  = Lambda-_{ell-1} - Gamma+_{ell-1}
    R-_{ell-1}      = (Zhat-_{ell-1} Lambda-_{ell-1}
                       - R+_{ell-1} Gamma+_{ell-1}) (Gamma-_{ell-1})^{-1}
"""

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .denoisers import BeliefSpec, DenoiserSuite, PrecisionBundle
from .errors import DivergedError, MlMatVampError, NotComputedError
from .linalg import DEFAULT_CAP, DEFAULT_FLOOR, psd_regularize, sym
from .model import log_transition

__all__ = ["VampOptions", "VampState", "VampTrace", "run",
           "fixed_point_report", "trace_to_csv", "trace_to_json"]


@dataclass
class VampOptions:
    n_iter: int = 20
    damping: float = 1.0
    floor: float = DEFAULT_FLOOR
    cap: float = DEFAULT_CAP
    mode: str = "mmse"
    initial_gamma_minus: list = None   # one d x d matrix per layer 0..L-1
    keep_messages: bool = True

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must be in (0, 1]")


@dataclass
class VampState:
    """Per-layer messages, precisions and estimates at one iteration."""

    r_minus: list
    r_plus: list
    gamma_minus: list
    gamma_plus: list
    lambda_plus: list
    lambda_minus: list
    zhat_plus: list
    zhat_minus: list


@dataclass
class IterationRecord:
    k: int
    zhat_plus: list
    zhat_minus: list
    r_minus: list = None           # messages consumed by forward pass k
    r_plus: list = None            # messages produced by forward pass k
    gamma_minus: list = None
    gamma_plus: list = None
    lambda_plus: list = None
    lambda_minus: list = None
    mse_plus: list = None          # per-layer (1/n)||Zhat+ - Z0||_F^2
    wall_time: float = 0.0
    safeguard_events: int = 0


@dataclass
class VampTrace:
    records: list = field(default_factory=list)
    model: object = None
    options: object = None
    signals: object = None
    y: np.ndarray = None
    safeguard_events: int = 0

    def append(self, rec):
        self.records.append(rec)

    @property
    def n_iter(self):
        return len(self.records)

    def layer_mse(self, ell, weight=None):
        """Per-iteration weighted MSE of Zhat+ for one layer."""
        if self.signals is None:
            raise NotComputedError("trace has no ground-truth signals")
        out = []
        for rec in self.records:
            err = rec.zhat_plus[ell] - self.signals.z[ell]
            h = np.eye(err.shape[1]) if weight is None else weight
            out.append(float(np.einsum("ni,ij,nj->", err, h, err))
                       / err.shape[0])
        return np.array(out)


def default_initial_gamma(model, probe=None):
    """Identity scaled by 1/trace of each layer's second moment."""
    from .se import layer_second_moments

    taus = probe if probe is not None else layer_second_moments(model)
    return [np.eye(model.d) / max(np.trace(t), 1e-12)
            for t in taus[: model.L]]


class _Safeguard:
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


def run(model, y, opts=None, suite=None, signals=None):
    """Execute the iteration and record a full trace.

    ``signals`` (ground truth) is optional and only feeds the per-layer
    MSE columns of the trace.
    """
    opts = opts or VampOptions()
    suite = suite or DenoiserSuite(model, mode=opts.mode)
    L = model.L
    dims = model.dims
    d = model.d
    y = np.asarray(y, dtype=float)
    if y.shape != (dims[-1], model.d_out):
        raise MlMatVampError(
            f"observation shape {y.shape} != ({dims[-1]}, {model.d_out})")

    guard = _Safeguard(opts.floor, opts.cap)
    gamma_minus = [g.copy() for g in (opts.initial_gamma_minus
                                      or default_initial_gamma(model))]
    r_minus = [np.zeros((dims[ell], d)) for ell in range(L)]
    r_plus = [np.zeros((dims[ell], d)) for ell in range(L)]
    gamma_plus = [np.eye(d) for _ in range(L)]
    lambda_plus = [np.eye(d) for _ in range(L)]
    lambda_minus = [np.eye(d) for _ in range(L)]
    zhat_plus = [np.zeros((dims[ell], d)) for ell in range(L)]
    zhat_minus = [np.zeros((dims[ell], d)) for ell in range(L)]

    trace = VampTrace(model=model, options=opts, signals=signals, y=y)
    damp = opts.damping

    def mix(new, old, first):
        return new if (first or damp >= 1.0) else damp * new + (1 - damp) * old

    for k in range(opts.n_iter):
        t0 = time.perf_counter()
        events_before = guard.events
        r_minus_in = [r.copy() for r in r_minus] if opts.keep_messages else None
        gm_in = [g.copy() for g in gamma_minus] if opts.keep_messages else None

        # Forward pass: blocks 0..L-1 update the plus side of layer ell.
        for ell in range(L):
            try:
                if ell == 0:
                    zhat, jac = suite.input_block.denoise(
                        r_minus[0], gamma_minus[0])
                else:
                    belief = BeliefSpec(
                        model.layer(ell), r_minus[ell], r_plus[ell - 1],
                        PrecisionBundle(gamma_minus[ell], gamma_plus[ell - 1]))
                    res = suite.block(ell).denoise(belief)
                    zhat, jac = res.zhat_plus, res.jac_plus
            except MlMatVampError as exc:
                raise type(exc)(
                    f"iteration {k}, layer {ell}, forward: {exc}") from exc
            if not np.all(np.isfinite(zhat)):
                raise DivergedError(
                    f"non-finite estimate at k={k}, layer {ell} (forward)",
                    trace)
            zhat_plus[ell] = zhat
            lam = guard(np.linalg.solve(jac, gamma_minus[ell]))
            gp_new = guard(lam - gamma_minus[ell])
            rp_new = np.linalg.solve(
                gp_new.T, (zhat @ lam - r_minus[ell] @ gamma_minus[ell]).T).T
            lambda_plus[ell] = lam
            gamma_plus[ell] = mix(gp_new, gamma_plus[ell], k == 0)
            r_plus[ell] = mix(rp_new, r_plus[ell], k == 0)

        # Backward pass: blocks L..1 update the minus side of layer ell-1.
        for ell in range(L, 0, -1):
            target = ell - 1
            try:
                if ell == L:
                    zhat, jac = suite.output_block.denoise(
                        r_plus[target], gamma_plus[target], y)
                else:
                    belief = BeliefSpec(
                        model.layer(ell), r_minus[ell], r_plus[target],
                        PrecisionBundle(gamma_minus[ell], gamma_plus[target]))
                    res = suite.block(ell).denoise(belief)
                    zhat, jac = res.zhat_minus, res.jac_minus
            except MlMatVampError as exc:
                raise type(exc)(
                    f"iteration {k}, layer {ell}, backward: {exc}") from exc
            if not np.all(np.isfinite(zhat)):
                raise DivergedError(
                    f"non-finite estimate at k={k}, layer {ell} (backward)",
                    trace)
            zhat_minus[target] = zhat
            lam = guard(np.linalg.solve(jac, gamma_plus[target]))
            gm_new = guard(lam - gamma_plus[target])
            rm_new = np.linalg.solve(
                gm_new.T, (zhat @ lam - r_plus[target] @ gamma_plus[target]).T).T
            lambda_minus[target] = lam
            gamma_minus[target] = mix(gm_new, gamma_minus[target], k == 0)
            r_minus[target] = mix(rm_new, r_minus[target], k == 0)

        mse = None
        if signals is not None:
            mse = [float(np.sum((zhat_plus[ell] - signals.z[ell]) ** 2)
                         / dims[ell]) for ell in range(L)]
        trace.append(IterationRecord(
            k=k,
            zhat_plus=[z.copy() for z in zhat_plus],
            zhat_minus=[z.copy() for z in zhat_minus],
            r_minus=r_minus_in,
            r_plus=[r.copy() for r in r_plus] if opts.keep_messages else None,
            gamma_minus=gm_in,
            gamma_plus=[g.copy() for g in gamma_plus],
            lambda_plus=[g.copy() for g in lambda_plus],
            lambda_minus=[g.copy() for g in lambda_minus],
            mse_plus=mse,
            wall_time=time.perf_counter() - t0,
            safeguard_events=guard.events - events_before,
        ))
    trace.safeguard_events = guard.events
    return trace


def fixed_point_report(trace, suite=None):
    """Consistency diagnostics at the end of a run."""
    if trace.n_iter < 2:
        raise NotComputedError("fixed-point report needs >= 2 iterations")
    last, prev = trace.records[-1], trace.records[-2]
    model = trace.model
    L = model.L
    report = {"consistency": [], "message_movement": [], "k": last.k}
    for ell in range(L):
        num = float(np.linalg.norm(last.zhat_plus[ell] - last.zhat_minus[ell]))
        den = max(float(np.linalg.norm(last.zhat_plus[ell])), 1e-30)
        report["consistency"].append(num / den)
        move = 0.0
        if last.r_plus is not None and prev.r_plus is not None:
            move += float(np.linalg.norm(last.r_plus[ell] - prev.r_plus[ell]))
        if last.r_minus is not None and prev.r_minus is not None:
            move += float(np.linalg.norm(last.r_minus[ell] - prev.r_minus[ell]))
        report["message_movement"].append(move)
    report["safeguard_events"] = trace.safeguard_events
    if trace.options is not None and trace.options.mode == "map":
        report["map_gradient_norm"] = map_objective_gradient_norm(trace)
    return report


def map_objective_value(model, z, y):
    """Global MAP objective (negative log posterior up to a constant) at
    the per-layer point estimates z[0..L-1], for gaussian-additive stacks."""
    from .linalg import inv_psd

    prior = model.input_prior
    val = float(np.sum(prior.neg_log_density(z[0])))
    for p, layer in enumerate(model.layers):
        ell = p + 1
        z_out = z[ell] if ell < model.L else y
        if layer.kind == "linear":
            val -= log_transition(layer, z_out, z[ell - 1], d=model.d)
        else:
            val -= float(np.sum(log_transition(layer, z_out, z[ell - 1])))
    return val


def map_objective_gradient_norm(trace):
    """Inf-norm of the global MAP objective gradient at the stitched
    estimate (Zhat+ per layer), for gaussian-additive stacks."""
    from .linalg import inv_psd

    model = trace.model
    last = trace.records[-1]
    z = [last.zhat_plus[ell] for ell in range(model.L)]
    grads = [np.zeros_like(zl) for zl in z]
    prior = model.input_prior
    if not (hasattr(prior, "cov") and hasattr(prior, "mean")):
        return float("nan")
    grads[0] += (z[0] - prior.mean[None, :]) @ inv_psd(prior.cov)
    for p, layer in enumerate(model.layers):
        ell = p + 1
        z_in = z[ell - 1]
        z_out = z[ell] if ell < model.L else trace.y
        if layer.kind == "linear":
            if layer.noise_prec is None:
                return float("nan")
            resid = (z_out - layer.w @ z_in - layer.bias_full(model.d)) \
                @ layer.noise_prec
            grads[ell - 1] -= layer.w.T @ resid
            if ell < model.L:
                grads[ell] += resid
        else:
            if layer.phi_kind != "gaussian-additive":
                return float("nan")
            resid = (layer.psi(z_in) - z_out) @ inv_psd(layer.noise_cov)
            jpsi = layer.psi.jacobian(z_in)
            grads[ell - 1] += np.einsum("nij,nj->ni", jpsi, resid)
            if ell < model.L:
                grads[ell] -= resid
    return float(max(np.abs(g).max() for g in grads))


def trace_to_csv(trace):
    """One row per (k, layer, metric); deterministic byte output."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k", "layer", "metric", "value"])
    for rec in trace.records:
        for ell in range(trace.model.L):
            if rec.mse_plus is not None:
                writer.writerow([rec.k, ell, "mse_plus",
                                 repr(rec.mse_plus[ell])])
            writer.writerow([rec.k, ell, "gamma_plus_trace",
                             repr(float(np.trace(rec.gamma_plus[ell])))])
            if rec.gamma_minus is not None:
                writer.writerow([rec.k, ell, "gamma_minus_trace",
                                 repr(float(np.trace(rec.gamma_minus[ell])))])
        writer.writerow([rec.k, -1, "wall_time", repr(rec.wall_time)])
        writer.writerow([rec.k, -1, "safeguard_events",
                         repr(rec.safeguard_events)])
    return buf.getvalue()


def trace_to_json(trace, full_snapshots=False):
    out = {"n_iter": trace.n_iter, "safeguard_events": trace.safeguard_events,
           "iterations": []}
    for rec in trace.records:
        item = {"k": rec.k, "wall_time": rec.wall_time,
                "safeguard_events": rec.safeguard_events,
                "mse_plus": rec.mse_plus}
        if full_snapshots:
            item["zhat_plus"] = [z.tolist() for z in rec.zhat_plus]
            item["gamma_plus"] = [g.tolist() for g in rec.gamma_plus]
            if rec.gamma_minus is not None:
                item["gamma_minus"] = [g.tolist() for g in rec.gamma_minus]
        out["iterations"].append(item)
    return json.dumps(out, sort_keys=True)
