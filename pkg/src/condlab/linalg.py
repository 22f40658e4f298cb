"""Dense symmetric-matrix primitives used by every curvature probe.

Matrices are plain 2-D ``float64`` numpy arrays.  The eigensolver is written
out here rather than delegated to LAPACK: a round-robin cyclic Jacobi method
for small matrices and Householder tridiagonalization followed by implicit
QL for larger ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CapacityError, DimensionError, EmptyBatchError, InvalidValueError

JACOBI_MAX_DIM = 64
RANK_EPS_FACTOR = 1e-12
PSD_CLAMP_REL = 1e-10
# Kronecker products above this many entries are refused (8 bytes each).
KRON_MAX_ENTRIES = 1 << 26

_EPS = np.finfo(np.float64).eps


@dataclass
class Spectrum:
    """Eigenvalues sorted in descending order.

    ``rank_eps`` is the threshold below which an eigenvalue counts as zero
    (``dim * max|lambda| * 1e-12``).  ``vectors`` holds the matching
    eigenvectors column-wise when they were requested.
    """

    eigenvalues: np.ndarray
    dim: int
    rank_eps: float
    vectors: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0]) if self.dim else 0.0

    def nonzero(self) -> np.ndarray:
        return self.eigenvalues[self.eigenvalues > self.rank_eps]


def as_matrix(a, name="matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def _check_square(a: np.ndarray, name: str = "matrix") -> None:
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {a.shape}")


def _round_robin(m: int):
    """Yield the m-1 rounds of a round-robin tournament on m (even) players."""
    players = list(range(m))
    for _ in range(m - 1):
        half = m // 2
        yield players[:half], players[half:][::-1]
        players = [players[0], players[-1]] + players[1:-1]


def jacobi_eig(a: np.ndarray, vectors: bool = False, max_sweeps: int = 60):
    """Cyclic Jacobi eigensolver for a symmetric matrix.

    Each sweep visits every off-diagonal pair once, grouped into rounds of
    disjoint pairs so one round is a single vectorized two-sided rotation.
    A pair is skipped once ``|a_pq| <= eps * sqrt(|a_pp a_qq|)``; iteration
    ends after a sweep with no rotations.  Returns unsorted (w, V).
    """
    A = np.array(a, dtype=np.float64, copy=True)
    n = A.shape[0]
    V = np.eye(n) if vectors else None
    if n <= 1:
        return np.diag(A).copy(), V
    m = n + (n % 2)
    rounds = []
    for left, right in _round_robin(m):
        pairs = [(p, q) if p < q else (q, p) for p, q in zip(left, right) if p < n and q < n]
        rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))

    for _ in range(max_sweeps):
        rotated = False
        for P, Q in rounds:
            apq = A[P, Q]
            app = A[P, P]
            aqq = A[Q, Q]
            active = np.abs(apq) > _EPS * np.sqrt(np.abs(app * aqq))
            active &= apq != 0.0
            if not active.any():
                continue
            rotated = True
            P, Q, apq, app, aqq = P[active], Q[active], apq[active], app[active], aqq[active]
            theta = (aqq - app) / (2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t[theta == 0.0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            colp = A[:, P].copy()
            colq = A[:, Q]
            A[:, P] = c * colp - s * colq
            A[:, Q] = s * colp + c * colq
            rowp = A[P, :].copy()
            rowq = A[Q, :]
            A[P, :] = c[:, None] * rowp - s[:, None] * rowq
            A[Q, :] = s[:, None] * rowp + c[:, None] * rowq
            A[P, Q] = 0.0
            A[Q, P] = 0.0
            if V is not None:
                vp = V[:, P].copy()
                vq = V[:, Q]
                V[:, P] = c * vp - s * vq
                V[:, Q] = s * vp + c * vq
        if not rotated:
            break
    return np.diag(A).copy(), V


def householder_tridiagonal(a: np.ndarray, vectors: bool = False):
    """Reduce symmetric ``a`` to tridiagonal form ``Q T Q^T``.

    Returns (diag, offdiag, Q); ``offdiag[i]`` couples rows i and i+1 and
    ``Q`` is None unless requested.
    """
    A = np.array(a, dtype=np.float64, copy=True)
    n = A.shape[0]
    Q = np.eye(n) if vectors else None
    for k in range(n - 2):
        x = A[k + 1:, k]
        alpha = np.linalg.norm(x)
        if alpha == 0.0:
            continue
        if x[0] > 0:
            alpha = -alpha
        v = x.copy()
        v[0] -= alpha
        vnorm2 = v @ v
        if vnorm2 == 0.0:
            continue
        beta = 2.0 / vnorm2
        sub = A[k + 1:, k + 1:]
        p = beta * (sub @ v)
        w = p - (0.5 * beta * (v @ p)) * v
        sub -= np.outer(v, w) + np.outer(w, v)
        A[k + 1:, k] = 0.0
        A[k, k + 1:] = 0.0
        A[k + 1, k] = A[k, k + 1] = alpha
        if Q is not None:
            block = Q[:, k + 1:]
            block -= beta * np.outer(block @ v, v)
    d = np.diag(A).copy()
    e = np.zeros(n)
    if n > 1:
        e[:-1] = np.diag(A, 1)
    return d, e, Q


def tridiagonal_ql(d, e, z: Optional[np.ndarray] = None, max_iter: int = 60):
    """Implicit-shift QL on a symmetric tridiagonal matrix.

    ``d`` is the diagonal and ``e[i]`` the (i, i+1) coupling with ``e[-1]``
    ignored.  If ``z`` is given, its columns are rotated in place so that
    ``z`` ends up holding eigenvectors of the original matrix.
    """
    n = len(d)
    d = [float(v) for v in d]
    e = [float(v) for v in e] + [0.0]
    e[n - 1] = 0.0
    # absolute floor keeps blocks of exact zeros from stalling the deflation test
    floor = _EPS * max((abs(a) + abs(b) for a, b in zip(d, e)), default=0.0)
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= _EPS * dd or abs(e[m]) <= floor:
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > max_iter:
                raise InvalidValueError("QL iteration failed to converge")
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            i = m - 1
            deflated = False
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    deflated = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                if z is not None:
                    zi1 = z[:, i + 1].copy()
                    z[:, i + 1] = s * z[:, i] + c * zi1
                    z[:, i] = c * z[:, i] - s * zi1
                i -= 1
            if deflated:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return np.array(d), z


def sym_eig(a, vectors: bool = False, psd: bool = False, method: str = "auto") -> Spectrum:
    """Eigendecomposition of a real symmetric matrix.

    The input is symmetrized as (A + A^T)/2.  ``method`` is ``"jacobi"``,
    ``"ql"`` or ``"auto"`` (Jacobi up to 64x64, QL above).  With ``psd=True``
    small negative round-off eigenvalues are clamped to zero; a negative
    eigenvalue larger than ``1e-10 * lambda_max`` raises InvalidValueError.
    """
    A = as_matrix(a)
    _check_square(A)
    if not np.all(np.isfinite(A)):
        raise InvalidValueError("matrix contains NaN or Inf")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    if method == "auto":
        method = "jacobi" if n <= JACOBI_MAX_DIM else "ql"
    if method == "jacobi":
        w, V = jacobi_eig(A, vectors=vectors)
    elif method == "ql":
        d, e, Q = householder_tridiagonal(A, vectors=vectors)
        w, V = tridiagonal_ql(d, e, Q)
    else:
        raise ValueError(f"unknown eigensolver method {method!r}")

    order = np.argsort(-w, kind="stable")
    w = w[order]
    if V is not None:
        V = V[:, order]
    scale = float(np.max(np.abs(w))) if n else 0.0
    rank_eps = n * scale * RANK_EPS_FACTOR
    if psd and n:
        floor = max(rank_eps, PSD_CLAMP_REL * scale)
        if w[-1] < -floor:
            raise InvalidValueError(f"matrix is not PSD (eigenvalue {w[-1]:.3e})")
        w = np.where(w < 0.0, 0.0, w)
    return Spectrum(eigenvalues=w, dim=n, rank_eps=rank_eps, vectors=V)


def kron(a, b, max_entries: int = KRON_MAX_ENTRIES) -> np.ndarray:
    """Kronecker product of two square matrices.

    ``out[i*n + k, j*n + l] = a[i, j] * b[k, l]``.
    """
    A = as_matrix(a, "left factor")
    B = as_matrix(b, "right factor")
    _check_square(A, "left factor")
    _check_square(B, "right factor")
    m, n = A.shape[0], B.shape[0]
    if (m * n) ** 2 > max_entries:
        raise CapacityError(f"kron result {m * n}x{m * n} exceeds cap of {max_entries} entries")
    return (A[:, None, :, None] * B[None, :, None, :]).reshape(m * n, m * n)


def spectral_norm(w, rtol: float = 1e-13, max_iter: int = 200_000) -> float:
    """Largest singular value by power iteration on ``W^T W``.

    Starts from the normalized all-ones vector.  That start can be an exact
    eigenvector of a smaller singular value, so a second pass from a fixed
    Philox(0) vector runs as well and the larger estimate wins; the result
    stays deterministic.
    """
    W = as_matrix(w)
    if W.size == 0 or not np.any(W):
        return 0.0
    G = W.T @ W
    v = np.ones(G.shape[0]) / math.sqrt(G.shape[0])
    lam = _power_iterate(G, v, rtol, max_iter)
    u = np.random.Generator(np.random.Philox(0)).standard_normal(G.shape[0])
    lam = max(lam, _power_iterate(G, u / np.linalg.norm(u), rtol, max_iter))
    return math.sqrt(max(lam, 0.0))


def _power_iterate(G: np.ndarray, v: np.ndarray, rtol: float, max_iter: int) -> float:
    lam = 0.0
    for _ in range(max_iter):
        u = G @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        new = float(v @ u)
        v = u / nu
        if abs(new - lam) <= rtol * abs(new):
            resid = np.linalg.norm(G @ v - new * v)
            if resid <= 1e-7 * abs(new):
                return float(v @ (G @ v))
        lam = new
    return lam


def frobenius_norm(w) -> float:
    W = as_matrix(w)
    return math.sqrt(float(np.sum(W * W)))


def second_moment(rows) -> np.ndarray:
    """Uncentered second moment ``(1/N) X^T X`` of the rows of X.

    The result is made exactly symmetric.
    """
    X = as_matrix(rows, "rows")
    if X.shape[0] == 0:
        raise EmptyBatchError("second moment of an empty batch")
    M = (X.T @ X) / X.shape[0]
    return 0.5 * (M + M.T)
