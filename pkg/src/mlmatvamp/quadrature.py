"""Integration node tables for MMSE denoisers.

Nodes are generated for a standard normal base measure and shifted/scaled
onto the Gaussian pseudo-prior by the caller (importance form).  Tables
are cached so repeated calls share literally the same nodes, which gives
the common-random-numbers coupling across iterations.
"""

from dataclasses import dataclass
from itertools import product

import numpy as np

from .rng import derive_rng

__all__ = ["QuadratureCfg", "NewtonCfg", "standard_nodes"]


@dataclass(frozen=True)
class QuadratureCfg:
    """Gauss-Hermite order for small d, Monte-Carlo size otherwise.

    ``budget`` caps the tensor-grid size order**d; above it (or above
    d = 3 at the default order) integration falls back to Monte-Carlo
    with ``samples`` common-random-number nodes.
    """

    order: int = 20
    samples: int = 20000
    budget: int = 8000
    seed: int = 20200224

    def uses_monte_carlo(self, dim):
        return self.order ** dim > self.budget


@dataclass(frozen=True)
class NewtonCfg:
    tol: float = 1e-9
    max_iter: int = 100
    kink_smooth: float = 0.0


_CACHE = {}


def standard_nodes(dim, cfg):
    """(nodes (J, dim), log base weights (J,)) for E_{N(0,I)} f."""
    key = (dim, cfg.order, cfg.samples, cfg.budget, cfg.seed)
    if key in _CACHE:
        return _CACHE[key]
    if cfg.uses_monte_carlo(dim):
        rng = derive_rng(cfg.seed, "mc-nodes", dim, cfg.samples)
        nodes = rng.standard_normal((cfg.samples, dim))
        logw = np.full(cfg.samples, -np.log(cfg.samples))
    else:
        x, w = np.polynomial.hermite_e.hermegauss(cfg.order)
        w = w / np.sqrt(2.0 * np.pi)
        nodes = np.array(list(product(x, repeat=dim)))
        logw = np.log(np.array(list(product(w, repeat=dim)))).sum(axis=1)
    nodes.setflags(write=False)
    logw.setflags(write=False)
    _CACHE[key] = (nodes, logw)
    return _CACHE[key]
