"""A-priori growth bound on the drift-driven part of the noisy component.

The solution is split into a stochastic convolution and a remainder whose
squared norm obeys a nonlinear integral inequality; the increasing transform
of that inequality turns it into a straight line in time, which is what gets
checked pathwise here.  The transform's integrand comes from a config-selected
growth family whose total integral provably diverges, the structural
requirement for non-explosion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.integrate as sint

from .coefficients import HolderDiniDrift, SegmentFunctional
from .engine import SimGrid, STREAM_REFERENCE, StepKernel, _block_normals, _chunk_size
from .errors import ConditionUnsatisfied, ConfigError, NonFinite
from .model import DelayMeasure, OperatorSet, SegmentPath

__all__ = [
    "GrowthPair",
    "BihariReport",
    "derive_growth_pair",
    "check_growth_condition",
    "psi_transform",
    "psi_inverse",
    "bihari_bound_check",
]


@dataclass(frozen=True)
class GrowthPair:
    """Growth envelope (Phi, h) for the inner-product drift condition.

    Phi families ("constant", "affine", "log_affine") all satisfy the
    divergence requirement int_1^inf ds / Phi(s) = inf analytically;
    h(s) = h0 + h1 s^2.  Both are constant in time, hence weakly increasing
    in the time argument.
    """

    phi_family: str = "affine"
    phi_c0: float = 1.0
    phi_c1: float = 1.0
    h_c0: float = 0.01
    h_c1: float = 0.5

    def __post_init__(self):
        if self.phi_family not in ("constant", "affine", "log_affine"):
            raise ConfigError(f"unknown growth family {self.phi_family!r}")
        if self.phi_c0 <= 0 or self.phi_c1 < 0 or self.h_c0 <= 0 or self.h_c1 < 0:
            raise ConfigError("growth-pair constants must be positive (c0) / nonnegative")

    def phi(self, s):
        s = np.asarray(s, dtype=float)
        if self.phi_family == "constant":
            return np.full_like(s, self.phi_c0)
        if self.phi_family == "affine":
            return self.phi_c0 + self.phi_c1 * s
        return self.phi_c0 + self.phi_c1 * (1.0 + s) * np.log(math.e + s)

    def h(self, s):
        s = np.asarray(s, dtype=float)
        return self.h_c0 + self.h_c1 * s ** 2

    @property
    def divergent(self) -> bool:
        """The reciprocal integral diverges for every supported family."""
        return True


def derive_growth_pair(b: HolderDiniDrift, f: SegmentFunctional,
                       eps: float = 1e-2) -> GrowthPair:
    """Affine envelope for a bounded drift and Lipschitz functional.

    Splitting the inner product with the usual quadratic inequality gives an
    affine Phi with slope 1/2 + 2c and offset (|F(0)| + sup|b|)^2 / 2, and
    h(s) = eps + (c/2) s^2, where c is the functional's Lipschitz constant.
    """
    c = f.lipschitz_c if f.builtin != "zero" else 0.0
    k0 = 0.5 * b.sup_bound ** 2
    return GrowthPair(phi_family="affine", phi_c0=k0 + eps, phi_c1=0.5 + 2.0 * c,
                      h_c0=eps, h_c1=0.5 * max(c, 0.0))


def check_growth_condition(b: HolderDiniDrift, f: SegmentFunctional,
                           nu: DelayMeasure, pair: GrowthPair, *,
                           n_samples: int = 1000, seed: int = 0,
                           spread: float = 1.0, n1: int | None = None) -> dict:
    """Sample the inner-product growth condition; report the worst ratio."""
    rng = np.random.default_rng(seed)
    n2 = b.n2
    n1 = n2 if n1 is None else n1
    m = max(1, nu.nodes.size)
    w = nu.weights

    worst = 0.0
    for _ in range(max(1, n_samples // 200)):
        k = min(200, n_samples)
        xi_n = spread * rng.standard_normal((k, m, n1))
        xi_e = spread * rng.standard_normal((k, n1))
        eta_n = spread * rng.standard_normal((k, m, n2))
        eta_e = spread * rng.standard_normal((k, n2))
        etp_n = spread * rng.standard_normal((k, m, n2))
        etp_e = spread * rng.standard_normal((k, n2))

        z_nodes = np.concatenate([xi_n, eta_n + etp_n], axis=2)
        z_end = np.concatenate([xi_e, eta_e + etp_e], axis=1)
        fv = f.evaluate(z_nodes, z_end, nu)
        bv = b(xi_e, eta_e + etp_e)
        lhs = np.einsum("kj,kj->k", fv + bv, eta_e)

        def seg_sq(nodes, end):
            return np.einsum("j,kjd,kjd->k", w, nodes, nodes) + \
                np.einsum("kd,kd->k", end, end)

        rhs = pair.phi(seg_sq(xi_n, xi_e) + seg_sq(eta_n, eta_e)) \
            + pair.h(np.sqrt(seg_sq(etp_n, etp_e)))
        worst = max(worst, float(np.max(lhs / rhs)))
    return {"passed": worst <= 1.0 + 1e-9, "worst_ratio": worst,
            "n_samples": n_samples, "seed": seed, "spread": spread}


# ---------------------------------------------------------------------------
# the increasing transform and its inverse
# ---------------------------------------------------------------------------

def psi_transform(pair: GrowthPair, n_rand: float, s: float) -> float:
    """Transform value int_1^s dv / (2 Phi(N + N v)) by adaptive quadrature."""
    if n_rand <= 1.0:
        raise ValueError("the random domination constant must exceed 1")
    if s <= 0:
        raise ValueError("transform argument must be positive")
    if s == 1.0:
        return 0.0
    val, _ = sint.quad(lambda v: 1.0 / (2.0 * pair.phi(n_rand * (1.0 + v))),
                       1.0, s, limit=200)
    return float(val)


def psi_inverse(pair: GrowthPair, n_rand: float, target: float,
                tol: float = 1e-10) -> float:
    """Inverse of the transform by monotone bisection."""
    lo, hi = 1e-12, 2.0
    while psi_transform(pair, n_rand, hi) < target:
        hi *= 2.0
        if hi > 1e300:
            raise ValueError("transform inverse out of range")
    if psi_transform(pair, n_rand, lo) > target:
        raise ValueError("target below the transform's range")
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if psi_transform(pair, n_rand, mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def _psi_forward_many(pair: GrowthPair, n_rand: float,
                      values: np.ndarray) -> np.ndarray:
    """Transform evaluated at many points by cumulative fixed-order quadrature.

    Anchored at 1; works for any positive values (negative transform below 1).
    """
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    anchors = np.concatenate([[1.0], sorted_vals])
    x, w = np.polynomial.legendre.leggauss(8)
    lo = anchors[:-1]
    hi = anchors[1:]
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    nodes = mid[:, None] + half[:, None] * x[None, :]
    integrand = 1.0 / (2.0 * pair.phi(n_rand * (1.0 + nodes)))
    pieces = half * (integrand @ w)
    cums = np.cumsum(pieces)
    out = np.empty_like(values)
    out[order] = cums
    return out


# ---------------------------------------------------------------------------
# pathwise bound check
# ---------------------------------------------------------------------------

@dataclass
class BihariReport:
    """Per-path outcome of the a-priori growth bound check."""

    passed: bool
    n_paths: int
    alphas: np.ndarray          # per-path alpha(T)
    n_consts: np.ndarray        # per-path realized domination constant
    margins: np.ndarray         # per-path min_t (rhs - lhs) of the transformed check
    pass_flags: np.ndarray
    times: np.ndarray
    observed_sup: np.ndarray    # (n_paths, n_times) running sup of |Ytilde|^2
    alpha_scale: float = 1.0


def bihari_bound_check(ops: OperatorSet, b: HolderDiniDrift, f: SegmentFunctional,
                       pair: GrowthPair, xi0: SegmentPath, nu: DelayMeasure,
                       grid: SimGrid, *, alpha_scale: float = 1.0,
                       check_condition: bool = True, condition_seed: int = 0,
                       stream: int = STREAM_REFERENCE) -> BihariReport:
    """Simulate and check the transformed growth bound along every path.

    The drift-free convolution is co-simulated with the full solution from the
    same noise; the remainder's running sup must stay below the inverse
    transform of (transform of alpha + t) at every grid time, equivalently the
    transform of the sup minus the transform of alpha must stay below t.
    ``alpha_scale`` < 1 deliberately invalidates the bound (falsification
    control).
    """
    if check_condition:
        rep = check_growth_condition(b, f, nu, pair, seed=condition_seed,
                                     n1=ops.space.n1)
        if not rep["passed"]:
            raise ConditionUnsatisfied(
                f"growth condition fails at sampled ratio {rep['worst_ratio']:.3f}")

    kern = StepKernel.build(ops, grid.dt)
    n1, n2 = ops.space.n1, ops.space.n2
    dt = grid.dt
    n_steps = grid.n_steps
    n_hist = int(round(xi0.r / dt)) if xi0.r > 0 else 0
    if xi0.times.size != n_hist + 1:
        raise ConfigError("initial segment is not aligned with the grid")
    node_off = np.round(nu.nodes / dt).astype(int)
    w_nodes = nu.weights

    n_paths = grid.n_paths
    times = grid.times()
    sup_all = np.empty((n_paths, n_steps + 1))
    alpha_all = np.empty(n_paths)
    nconst_all = np.empty(n_paths)

    hist0 = xi0.values
    chunk = _chunk_size(n_steps, 3 * (n1 + 2 * n2))
    for lo in range(0, n_paths, chunk):
        hi = min(lo + chunk, n_paths)
        k_paths = hi - lo
        normals = _block_normals(grid.seed, stream, lo, k_paths, n_steps, n2)
        conv_y = (normals.reshape(-1, n2) @ kern.chol_plain.T).reshape(k_paths, n_steps, n2)

        hx = np.empty((k_paths, n_hist + n_steps + 1, n1))
        hyt = np.empty((k_paths, n_hist + n_steps + 1, n2))
        hm = np.zeros((k_paths, n_hist + n_steps + 1, n2))
        hx[:, :n_hist + 1] = hist0[None, :, :n1]
        hyt[:, :n_hist + 1] = hist0[None, :, n1:]   # convolution vanishes before 0

        x = np.tile(hist0[-1, :n1], (k_paths, 1))
        y = np.tile(hist0[-1, n1:], (k_paths, 1))
        m = np.zeros((k_paths, n2))

        sup_yt = np.einsum("kj,kj->k", y - m, y - m)
        sup_all[lo:hi, 0] = sup_yt
        h_int = np.zeros(k_paths)
        n_run = np.full(k_paths, 1.0 + 1e-6)

        def seg_sq(buf, i_now):
            vals = buf[:, i_now + node_off, :]
            return np.einsum("j,kjd,kjd->k", w_nodes, vals, vals) \
                + np.einsum("kd,kd->k", buf[:, i_now, :], buf[:, i_now, :])

        for k in range(n_steps):
            i_now = n_hist + k
            # alpha integrand and domination constant at the current time
            m_sq = seg_sq(hm, i_now)
            h_int += pair.h(np.sqrt(m_sq)) * dt
            ratio = (seg_sq(hx, i_now) + seg_sq(hyt, i_now)) / (1.0 + sup_yt)
            n_run = np.maximum(n_run, ratio)

            nodes = np.concatenate([hx[:, i_now + node_off, :],
                                    hyt[:, i_now + node_off, :]
                                    + hm[:, i_now + node_off, :]], axis=2)
            endpoint = np.concatenate([x, y], axis=1)
            drift = b(x, y) + f.evaluate(nodes, endpoint, nu)
            x = x @ kern.e1.T + y @ kern.int_e1_b.T
            y = y @ kern.e2.T + drift @ kern.int_e2.T + conv_y[:, k]
            m = m @ kern.e2.T + conv_y[:, k]
            if not (np.isfinite(x).all() and np.isfinite(y).all()):
                raise NonFinite("state left the floating-point range", time=(k + 1) * dt)
            hx[:, i_now + 1] = x
            hyt[:, i_now + 1] = y - m
            hm[:, i_now + 1] = m

            yt_sq = np.einsum("kj,kj->k", y - m, y - m)
            sup_yt = np.maximum(sup_yt, yt_sq)
            sup_all[lo:hi, k + 1] = sup_yt

        # final-time contributions to the domination constant
        i_now = n_hist + n_steps
        ratio = (seg_sq(hx, i_now) + seg_sq(hyt, i_now)) / (1.0 + sup_yt)
        n_run = np.maximum(n_run, ratio)
        y0 = hist0[-1, n1:]
        alpha_all[lo:hi] = float(y0 @ y0) + 2.0 * h_int
        nconst_all[lo:hi] = 1.0 + np.maximum(1.0, n_run)

    alphas = alpha_scale * alpha_all
    margins = np.empty(n_paths)
    flags = np.empty(n_paths, dtype=bool)
    for p in range(n_paths):
        vals = np.concatenate([[alphas[p]], sup_all[p]])
        psi_vals = _psi_forward_many(pair, nconst_all[p], vals)
        lhs = psi_vals[1:] - psi_vals[0]
        margins[p] = float(np.min(times - lhs))
        flags[p] = margins[p] >= -1e-12
    return BihariReport(passed=bool(np.all(flags)), n_paths=n_paths,
                        alphas=alphas, n_consts=nconst_all, margins=margins,
                        pass_flags=flags, times=times, observed_sup=sup_all,
                        alpha_scale=alpha_scale)
