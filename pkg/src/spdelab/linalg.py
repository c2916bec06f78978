"""Dense linear-algebra helpers: matrix exponentials, phi-functions, quadrature.

All operators in this package are small dense matrices (a handful of spectral
modes), so everything here favours accuracy and determinism over scale.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from .errors import SingularGramian

__all__ = [
    "expm",
    "phi1",
    "int_expm",
    "expm_at_times",
    "adaptive_matrix_quad",
    "psd_clip",
    "robust_cholesky",
    "spectral_norm",
]


def expm(a: np.ndarray) -> np.ndarray:
    """Matrix exponential (scaling-and-squaring, machine precision)."""
    return sla.expm(np.asarray(a, dtype=float))


def phi1(a: np.ndarray, dt: float) -> np.ndarray:
    """First phi-function ``(e^{A dt} - I)(A dt)^{-1}``.

    Uses the power series for small ``||A dt||`` (avoids cancellation at small
    steps), a direct solve otherwise, and an augmented-exponential fallback
    when ``A dt`` is singular.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    m = a * dt
    norm = np.linalg.norm(m, ord=np.inf)
    if norm < 0.5:
        term = np.eye(n)
        out = np.eye(n)
        for k in range(1, 30):
            term = term @ m / (k + 1)
            out = out + term
            if np.linalg.norm(term, ord=np.inf) < 1e-18 * max(1.0, norm):
                break
        return out
    try:
        return np.linalg.solve(m, expm(m) - np.eye(n))
    except np.linalg.LinAlgError:
        return int_expm(a, dt) / dt


def int_expm(a: np.ndarray, dt: float) -> np.ndarray:
    """Exact ``int_0^dt e^{A s} ds`` (equals ``dt * phi1(A, dt)``)."""
    return dt * phi1(a, dt)


def _eig_factors(a: np.ndarray):
    """Eigendecomposition usable for exponentials, or None if ill-conditioned."""
    w, v = np.linalg.eig(a)
    cond = np.linalg.cond(v)
    if not np.isfinite(cond) or cond > 1e8:
        return None
    vinv = np.linalg.inv(v)
    # reject if reconstruction is poor (defective or near-defective matrix)
    err = np.linalg.norm(v @ np.diag(w) @ vinv - a) / max(1.0, np.linalg.norm(a))
    if err > 1e-12:
        return None
    return w, v, vinv


def expm_at_times(a: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """``e^{A t}`` for every t in ``ts``, returned as ``(len(ts), n, n)``.

    Diagonalizes once when the eigenbasis is well conditioned; otherwise falls
    back to one scaling-and-squaring call per time.
    """
    a = np.asarray(a, dtype=float)
    ts = np.asarray(ts, dtype=float)
    n = a.shape[0]
    if np.count_nonzero(a - np.diag(np.diagonal(a))) == 0:
        d = np.diagonal(a)
        out = np.zeros((ts.size, n, n))
        idx = np.arange(n)
        out[:, idx, idx] = np.exp(np.outer(ts, d))
        return out
    fac = _eig_factors(a)
    if fac is not None:
        w, v, vinv = fac
        ew = np.exp(np.outer(ts, w))  # (nt, n) complex
        out = np.einsum("ij,tj,jk->tik", v, ew, vinv)
        return np.ascontiguousarray(out.real)
    return np.stack([expm(a * t) for t in ts])


@lru_cache(maxsize=32)
def _gl_rule(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    return x, w


def adaptive_matrix_quad(f, a: float, b: float, rel_tol: float = 1e-12,
                         order: int = 10, max_panels: int = 4096) -> np.ndarray:
    """Composite Gauss-Legendre integral of a matrix-valued function on [a, b].

    Panels are doubled until two successive estimates agree to ``rel_tol`` in
    Frobenius norm (relative to the current estimate). ``f`` maps an array of
    abscissae ``(m,)`` to stacked values ``(m, ...)``.
    """
    if b <= a:
        probe = np.asarray(f(np.array([a])))
        return np.zeros(probe.shape[1:])
    x, w = _gl_rule(order)
    prev = None
    panels = 2
    while panels <= max_panels:
        edges = np.linspace(a, b, panels + 1)
        mid = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 * (edges[1:] - edges[:-1])
        nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
        weights = (half[:, None] * w[None, :]).ravel()
        vals = np.asarray(f(nodes))
        est = np.tensordot(weights, vals, axes=(0, 0))
        if prev is not None:
            scale = np.linalg.norm(est) + 1e-300
            if np.linalg.norm(est - prev) <= rel_tol * scale:
                return est
        prev = est
        panels *= 2
    return prev


def psd_clip(s: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Symmetrize and clip tiny negative eigenvalues of a covariance matrix.

    Raises if an eigenvalue is below ``-tol`` relative to the matrix scale
    (that would indicate a genuinely indefinite input, not roundoff).
    """
    s = 0.5 * (s + s.T)
    w, v = np.linalg.eigh(s)
    scale = max(1.0, float(np.max(np.abs(w), initial=0.0)))
    if np.min(w, initial=0.0) < -tol * scale:
        raise SingularGramian("covariance matrix is indefinite beyond roundoff",
                              cond=float(np.min(w)))
    w = np.clip(w, 0.0, None)
    return (v * w) @ v.T


def robust_cholesky(s: np.ndarray) -> np.ndarray:
    """Square root L with L L^T = S for a (numerically) PSD matrix."""
    s = 0.5 * (s + s.T)
    try:
        return np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(s)
        w = np.clip(w, 0.0, None)
        return v * np.sqrt(w)


def spectral_norm(a: np.ndarray) -> float:
    """Operator 2-norm."""
    return float(np.linalg.norm(a, ord=2))
