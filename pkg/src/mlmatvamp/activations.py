"""Scalar activations and the row-wise deterministic maps built from them.

A row map psi sends a row u in R^{1 x d_in} to R^{1 x d_out}.  Jacobians
follow the row-vector convention used throughout the package: for a
linear map f(u) = u @ A the Jacobian is A, i.e. J[i, j] = d f_j / d u_i.
"""

import numpy as np

from .errors import InvalidConfigError

__all__ = [
    "Activation",
    "ACTIVATIONS",
    "get_activation",
    "ElementwiseMap",
    "LinearCombinationMap",
]


class Activation:
    """Scalar activation with first/second derivatives and kink locations."""

    def __init__(self, name, fn, deriv, second_deriv, kinks=()):
        self.name = name
        self.fn = fn
        self.deriv = deriv
        self.second_deriv = second_deriv
        self.kinks = tuple(kinks)

    def __call__(self, x):
        return self.fn(x)

    def __repr__(self):
        return f"Activation({self.name!r})"


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


ACTIVATIONS = {
    "identity": Activation(
        "identity",
        lambda x: np.asarray(x, dtype=float),
        lambda x: np.ones_like(np.asarray(x, dtype=float)),
        lambda x: np.zeros_like(np.asarray(x, dtype=float)),
    ),
    "relu": Activation(
        "relu",
        lambda x: np.maximum(x, 0.0),
        lambda x: (np.asarray(x) > 0).astype(float),
        lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        kinks=(0.0,),
    ),
    "sigmoid": Activation(
        "sigmoid",
        _sigmoid,
        lambda x: _sigmoid(x) * (1.0 - _sigmoid(x)),
        lambda x: _sigmoid(x) * (1.0 - _sigmoid(x)) * (1.0 - 2.0 * _sigmoid(x)),
    ),
    "tanh": Activation(
        "tanh",
        np.tanh,
        lambda x: 1.0 - np.tanh(x) ** 2,
        lambda x: -2.0 * np.tanh(x) * (1.0 - np.tanh(x) ** 2),
    ),
}


def get_activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise InvalidConfigError(
            f"unknown activation {name!r}; known: {sorted(ACTIVATIONS)}"
        ) from None


class ElementwiseMap:
    """psi(u) = activation applied entrywise, d_out = d_in."""

    def __init__(self, activation, dim):
        self.activation = activation
        self.d_in = dim
        self.d_out = dim

    @property
    def has_kinks(self):
        return bool(self.activation.kinks)

    def __call__(self, u):
        return self.activation(np.asarray(u, dtype=float))

    def jacobian(self, u):
        """(n, d_in, d_out) stack of per-row Jacobians."""
        u = np.asarray(u, dtype=float)
        n, d = u.shape
        jac = np.zeros((n, d, d))
        idx = np.arange(d)
        jac[:, idx, idx] = self.activation.deriv(u)
        return jac

    def curvature(self, u, lam):
        """sum_k lam[:, k] * d^2 psi_k / du du for each row -> (n, d, d)."""
        u = np.asarray(u, dtype=float)
        n, d = u.shape
        out = np.zeros((n, d, d))
        idx = np.arange(d)
        out[:, idx, idx] = lam * self.activation.second_deriv(u)
        return out


class LinearCombinationMap:
    """psi(u) = activation(u) @ weights, for known output weights.

    This is the committee-machine output map: entrywise activation
    followed by a fixed linear read-out (d_in, d_out) matrix.
    """

    def __init__(self, activation, weights):
        self.activation = activation
        w = np.asarray(weights, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        self.weights = w
        self.d_in, self.d_out = w.shape

    @property
    def has_kinks(self):
        return bool(self.activation.kinks)

    def __call__(self, u):
        return self.activation(np.asarray(u, dtype=float)) @ self.weights

    def jacobian(self, u):
        u = np.asarray(u, dtype=float)
        der = self.activation.deriv(u)  # (n, d_in)
        return der[:, :, None] * self.weights[None, :, :]

    def curvature(self, u, lam):
        u = np.asarray(u, dtype=float)
        n, d = u.shape
        coeff = lam @ self.weights.T  # (n, d_in)
        out = np.zeros((n, d, d))
        idx = np.arange(d)
        out[:, idx, idx] = coeff * self.activation.second_deriv(u)
        return out
