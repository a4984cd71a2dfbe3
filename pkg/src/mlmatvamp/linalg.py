"""Dense matrix utilities: Haar sampling, weight SVD, PSD safeguards,
correlated Gaussian rows.

Matrices are plain float64 ndarrays.  Symmetric-PSD arguments are
validated where the math requires it rather than wrapped in a type.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidCovarianceError, NumericalError

__all__ = [
    "DEFAULT_FLOOR",
    "DEFAULT_CAP",
    "SvdFactors",
    "sample_haar_orthogonal",
    "svd_factor",
    "psd_regularize",
    "sample_rows_gaussian",
    "sym",
    "sqrtm_psd",
    "inv_psd",
    "solve_psd",
    "check_psd",
    "assert_finite",
]

DEFAULT_FLOOR = 1e-8
DEFAULT_CAP = 1e8


def sym(m):
    """Symmetric part (m + m^T)/2."""
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def assert_finite(a, what="array"):
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{what} contains non-finite entries")
    return a


def check_psd(m, tol=1e-10, what="matrix"):
    """Validate symmetry and eigenvalues >= -tol; returns eigenvalues."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"{what} must be square, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max()))
    if np.abs(m - m.T).max() > 1e-12 * scale:
        raise InvalidCovarianceError(f"{what} is not symmetric")
    w = np.linalg.eigvalsh(sym(m))
    if w.min() < -tol * scale:
        raise InvalidCovarianceError(
            f"{what} has negative eigenvalue {w.min():.3e}"
        )
    return w


def sample_haar_orthogonal(n, rng):
    """Haar-distributed orthogonal n x n matrix.

    QR of an iid Gaussian matrix with the sign of diag(R) folded into the
    columns of Q; without the sign correction the QR output is not Haar.
    """
    if n < 1:
        raise DimensionError("orthogonal dimension must be >= 1")
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


@dataclass
class SvdFactors:
    """SVD of a weight matrix in the convention W = v_out @ diag(s) @ v_in.

    ``v_in`` absorbs the transpose of the usual right-singular factor, so
    the rotated input coordinate is ``v_in @ Z`` and reconstruction uses
    no transposes.  ``singular`` has length min(n_out, n_in) and is
    nonincreasing.
    """

    v_out: np.ndarray
    singular: np.ndarray
    v_in: np.ndarray
    n_out: int = field(init=False)
    n_in: int = field(init=False)

    def __post_init__(self):
        self.n_out = self.v_out.shape[0]
        self.n_in = self.v_in.shape[0]

    def padded_singular(self, length=None):
        """Singular values zero-padded to ``length`` (default n_out)."""
        if length is None:
            length = self.n_out
        s = np.zeros(length)
        k = min(len(self.singular), length)
        s[:k] = self.singular[:k]
        return s

    def reconstruct(self):
        smat = np.zeros((self.n_out, self.n_in))
        k = len(self.singular)
        smat[:k, :k] = np.diag(self.singular)
        return self.v_out @ smat @ self.v_in


def svd_factor(w):
    """Factor a weight matrix; see :class:`SvdFactors` for the convention."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 2:
        raise DimensionError("weight matrix must be 2-d")
    assert_finite(w, "weight matrix")
    try:
        u, s, vh = np.linalg.svd(w, full_matrices=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - rare
        raise NumericalError(f"SVD did not converge: {exc}") from exc
    return SvdFactors(v_out=u, singular=s, v_in=vh)


def psd_regularize(m, floor=DEFAULT_FLOOR, cap=DEFAULT_CAP):
    """Clamp the spectrum of the symmetrized matrix into [floor, cap]."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"psd_regularize needs a square matrix, got {m.shape}")
    if floor > cap:
        raise ValueError("floor must be <= cap")
    w, v = np.linalg.eigh(sym(m))
    w = np.clip(w, floor, cap)
    return sym((v * w) @ v.T)


def sqrtm_psd(m, tol=1e-10):
    """Symmetric square root; small negative eigenvalues are clipped to 0."""
    m = sym(np.asarray(m, dtype=float))
    w, v = np.linalg.eigh(m)
    scale = max(1.0, float(np.abs(w).max()))
    if w.min() < -tol * scale:
        raise InvalidCovarianceError(
            f"matrix square root of indefinite matrix (min eig {w.min():.3e})"
        )
    return sym((v * np.sqrt(np.clip(w, 0.0, None))) @ v.T)


def inv_psd(m):
    """Inverse of a symmetric PD matrix via eigendecomposition."""
    m = sym(np.asarray(m, dtype=float))
    w, v = np.linalg.eigh(m)
    if w.min() <= 0:
        raise NumericalError(f"matrix is not PD (min eig {w.min():.3e})")
    return sym((v / w) @ v.T)


def solve_psd(a, b):
    """Solve a @ x = b for symmetric PD a."""
    try:
        c = np.linalg.cholesky(sym(a))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Cholesky failed: {exc}") from exc
    y = np.linalg.solve(c, b)
    return np.linalg.solve(c.T, y)


def sample_rows_gaussian(n, cov, rng):
    """n iid rows from N(0, cov) using the symmetric square root.

    Accepts singular covariances; raises InvalidCovarianceError when the
    symmetrized input has an eigenvalue below -1e-10.
    """
    cov = sym(np.asarray(cov, dtype=float))
    d = cov.shape[0]
    w, v = np.linalg.eigh(cov)
    scale = max(1.0, float(np.abs(w).max()))
    if w.min() < -1e-10 * scale:
        raise InvalidCovarianceError(
            f"covariance has negative eigenvalue {w.min():.3e}"
        )
    root = sym((v * np.sqrt(np.clip(w, 0.0, None))) @ v.T)
    return rng.standard_normal((n, d)) @ root
