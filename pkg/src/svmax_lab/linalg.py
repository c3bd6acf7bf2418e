"""Dense SVD, matrix norms and the mean singular value with its bounds.

The SVD is a one-sided (Hestenes) Jacobi iteration run on the thinner
orientation of the input, after a QR step when the matrix is strictly tall.
The rotation sweeps are compiled with numba.
"""
import warnings
from dataclasses import dataclass

import numba
import numpy as np

from ._validation import as_matrix
from .errors import DegenerateSpectrumWarning, InvalidInput, ZeroVector

JACOBI_TOL = 1e-12
MAX_SWEEPS = 60
DEGENERATE_RTOL = 1e-8


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # rows x r
    s: np.ndarray  # r, descending
    v: np.ndarray  # cols x r

    def reconstruct(self):
        return (self.u * self.s) @ self.v.T


@dataclass(frozen=True)
class SvBounds:
    lower: float
    upper: float

    def __iter__(self):
        yield self.lower
        yield self.upper


@numba.njit(cache=True)
def _jacobi_sweeps(wt, vt, tol, max_sweeps):
    """Cyclic one-sided Jacobi on the rows of `wt`, accumulating rotations in `vt`.

    Returns the number of sweeps that applied at least one rotation.
    """
    n, m = wt.shape
    nv = vt.shape[1]
    tiny = 1e-300
    for sweep in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(m):
                    x = wt[i, k]
                    y = wt[j, k]
                    alpha += x * x
                    beta += y * y
                    gamma += x * y
                if alpha <= tiny or beta <= tiny or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sign = 1.0 if zeta >= 0.0 else -1.0
                t = sign / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for k in range(m):
                    x = wt[i, k]
                    y = wt[j, k]
                    wt[i, k] = c * x - s * y
                    wt[j, k] = s * x + c * y
                for k in range(nv):
                    x = vt[i, k]
                    y = vt[j, k]
                    vt[i, k] = c * x - s * y
                    vt[j, k] = s * x + c * y
        if not rotated:
            return sweep
    return max_sweeps


def _jacobi_tall(a):
    """One-sided Jacobi on a matrix with rows >= cols. Returns (w, v) with a @ v = w."""
    # rows of wt/vt are the columns being orthogonalized
    wt = np.ascontiguousarray(a.T, dtype=np.float64)
    vt = np.eye(a.shape[1])
    _jacobi_sweeps(wt, vt, JACOBI_TOL, MAX_SWEEPS)
    return wt.T, vt.T


def _complete_basis(u, keep):
    """Replace the columns of `u` not in `keep` by an orthonormal completion."""
    m, r = u.shape
    basis = [u[:, k] for k in range(r) if keep[k]]
    candidates = iter(np.eye(m))
    for k in range(r):
        if keep[k]:
            continue
        while True:
            x = next(candidates).copy()
            for _ in range(2):
                for q in basis:
                    x -= (q @ x) * q
            norm = np.linalg.norm(x)
            if norm > 1e-6:
                break
        x /= norm
        u[:, k] = x
        basis.append(x)
    return u


def svd(a):
    """Thin SVD ``a = u @ diag(s) @ v.T`` with ``s`` sorted descending."""
    a = as_matrix(a, "a")
    rows, cols = a.shape
    if rows < cols:
        res = svd(a.T)
        return SvdResult(u=res.v, s=res.s, v=res.u)

    if rows > cols:
        # QR first: Jacobi then runs on the small triangular factor
        q, r_factor = np.linalg.qr(a)
    else:
        q, r_factor = None, a
    w, v = _jacobi_tall(r_factor)
    s = np.linalg.norm(w, axis=0)
    order = np.argsort(-s, kind="stable")
    s, w, v = s[order], w[:, order], v[:, order]

    smax = s[0] if s.size else 0.0
    keep = s > max(rows, cols) * np.finfo(np.float64).eps * smax
    if smax == 0.0:
        keep[:] = False
    u = np.zeros_like(w)
    u[:, keep] = w[:, keep] / s[keep]
    if not keep.all():
        u = _complete_basis(u, keep)
    if q is not None:
        u = q @ u
    return SvdResult(u=u, s=s, v=v)


def singular_values(a):
    return svd(a).s


def mean_singular_value(e):
    """Average of the min(rows, cols) singular values of `e`."""
    s = svd(e).s
    return float(np.sum(s) / s.size)


def grad_mean_singular_value(e, result=None):
    """Gradient of `mean_singular_value` w.r.t. `e`: ``u @ v.T / min(rows, cols)``.

    Warns with DegenerateSpectrumWarning when a singular value is (near) zero,
    where the mean is not differentiable and ``u @ v.T`` is one subgradient.
    Repeated non-zero singular values are harmless: ``u @ v.T`` is then still
    the unique polar factor.
    """
    if result is None:
        result = svd(e)
    s = result.s
    if s[0] == 0.0 or s[-1] <= DEGENERATE_RTOL * s[0]:
        warnings.warn("near-zero singular value; returning a subgradient",
                      DegenerateSpectrumWarning, stacklevel=2)
    return (result.u @ result.v.T) / s.size


def sv_bounds(b, d):
    """Lower/upper bounds on the mean singular value of a b x d matrix with unit rows."""
    if int(b) != b or int(d) != d or b < 1 or d < 1:
        raise InvalidInput(f"b and d must be positive integers, got ({b}, {d})")
    b, d = int(b), int(d)
    r = min(b, d)
    lower = np.sqrt(b) / r
    # sqrt(b*d/max(b,d)) * sqrt(b) / r, simplified per orientation
    upper = np.sqrt(b / d) if b >= d else 1.0
    return SvBounds(float(lower), float(upper))


def matrix_norms(a):
    """Return (l1, linf, frobenius, nuclear) norms of `a`.

    l1 and linf are the induced norms: max absolute column sum and max
    absolute row sum.
    """
    a = as_matrix(a, "a")
    absa = np.abs(a)
    l1 = float(absa.sum(axis=0).max())
    linf = float(absa.sum(axis=1).max())
    fro = float(np.sqrt(np.sum(a * a)))
    nuclear = float(np.sum(svd(a).s))
    return l1, linf, fro, nuclear


def l2_normalize_rows(a):
    a = as_matrix(a, "a")
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ZeroVector("cannot normalize an all-zero row")
    return a / norms
