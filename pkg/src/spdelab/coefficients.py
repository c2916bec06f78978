"""Coefficient families: Holder-Dini drifts and Lipschitz segment functionals.

The drift families are closed-form built-ins chosen so their continuity
constants are known exactly, which makes the sampled regularity checks
meaningful rather than decorative.  All built-ins are globally bounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate as sint

from .errors import ConfigError, DimensionMismatch
from .model import DelayMeasure, SegmentPath

__all__ = [
    "DiniModulus",
    "dini_phi",
    "HolderDiniDrift",
    "SegmentFunctional",
    "check_drift_moduli",
    "eval_coefficients",
]


@dataclass(frozen=True)
class DiniModulus:
    """Modulus K / log^(1+delta)(c + 1/s), continuous at 0 with value 0.

    ``c`` must be large enough that the square of the modulus is concave;
    :meth:`validate` checks that numerically together with convergence of the
    Dini integral.
    """

    k: float = 1.0
    delta: float = 1.0
    c: float = math.e

    def __post_init__(self):
        if self.k < 0 or self.delta <= 0 or self.c < math.e:
            raise ConfigError("modulus needs k >= 0, delta > 0, c >= e")

    def __call__(self, s):
        return dini_phi(s, self)

    @property
    def sup_value(self) -> float:
        """Limit of the modulus as s -> infinity."""
        return self.k / math.log(self.c) ** (1.0 + self.delta)

    def dini_integral(self, tail_cut: float = 60.0) -> float:
        """int_0^1 phi(s)/s ds, via the substitution s = e^{-u} plus a tail bound."""
        if self.k == 0.0:
            return 0.0

        def g(u):
            return self.k / np.log(self.c + np.exp(u)) ** (1.0 + self.delta)

        head, _ = sint.quad(g, 0.0, tail_cut, limit=200)
        tail = self.k * tail_cut ** (-self.delta) / self.delta
        return float(head + tail)

    def validate(self, grid_size: int = 200) -> dict:
        """Numerically check monotonicity and concavity of the squared modulus."""
        s = np.logspace(-8, 3, grid_size)
        phi = dini_phi(s, self)
        increasing = bool(np.all(np.diff(phi) >= -1e-14))
        mid = dini_phi(0.5 * (s[:-1] + s[1:]), self)
        concave_defect = float(np.max(0.5 * (phi[:-1] ** 2 + phi[1:] ** 2) - mid ** 2,
                                      initial=0.0))
        integral = self.dini_integral()
        return {
            "increasing": increasing,
            "square_concave": concave_defect <= 1e-12,
            "concavity_defect": concave_defect,
            "dini_integral": integral,
            "passed": increasing and concave_defect <= 1e-12 and math.isfinite(integral),
        }


def dini_phi(s, m: DiniModulus):
    """Evaluate the Dini modulus; scalar in, scalar out."""
    arr = np.asarray(s, dtype=float)
    if np.any(arr < 0):
        raise ValueError("modulus argument must be nonnegative")
    out = np.zeros_like(arr)
    pos = arr > 0
    out[pos] = m.k / np.log(m.c + 1.0 / arr[pos]) ** (1.0 + m.delta)
    return float(out) if np.isscalar(s) or arr.ndim == 0 else out


@dataclass(frozen=True)
class HolderDiniDrift:
    """Bounded drift with modulus K |x-x'|^alpha + phi(|y-y'|).

    builtin tags
    ------------
    zero       b = 0
    constant   b = v
    sine       b = v sin(|x|)          (Lipschitz in x, hence alpha-Holder)
    dini_bump  b = v phi(|y|)          (inherits the modulus exactly)
    """

    alpha: float
    k_holder: float
    modulus: DiniModulus
    builtin: str = "zero"
    scale: float = 1.0
    direction: np.ndarray | None = None
    n2: int = 1

    def __post_init__(self):
        if not (2.0 / 3.0 < self.alpha < 1.0):
            raise ConfigError("holder exponent must lie in (2/3, 1)")
        if self.k_holder <= 0:
            raise ConfigError("holder constant must be positive")
        if self.builtin not in ("zero", "constant", "sine", "dini_bump"):
            raise ConfigError(f"unknown drift builtin {self.builtin!r}")
        if self.direction is None:
            d = np.ones(self.n2) / math.sqrt(self.n2)
        else:
            d = np.asarray(self.direction, dtype=float)
            norm = np.linalg.norm(d)
            if norm == 0:
                raise ConfigError("drift direction must be nonzero")
            d = d / norm
        object.__setattr__(self, "direction", np.ascontiguousarray(d))
        object.__setattr__(self, "n2", int(d.size))

    @property
    def vector(self) -> np.ndarray:
        return self.scale * self.direction

    @property
    def sup_bound(self) -> float:
        if self.builtin == "zero":
            return 0.0
        if self.builtin in ("constant", "sine"):
            return abs(self.scale)
        return abs(self.scale) * self.modulus.sup_value

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Vectorized evaluation: x (m, n1), y (m, n2) -> (m, n2)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        m = x.shape[0]
        if self.builtin == "zero":
            return np.zeros((m, self.n2))
        if self.builtin == "constant":
            return np.tile(self.vector, (m, 1))
        if self.builtin == "sine":
            amp = np.sin(np.linalg.norm(x, axis=1))
        else:  # dini_bump
            amp = dini_phi(np.linalg.norm(y, axis=1), self.modulus)
        return np.outer(self.scale * amp, self.direction)


@dataclass(frozen=True)
class SegmentFunctional:
    """Lipschitz map from a history segment into the noisy component space.

    builtin tags
    ------------
    zero             F = 0
    nu_average       F = scale * sum_j w_j P2 xi(theta_j)     (P2 = Y block)
    endpoint_linear  F = scale * P2 xi(0)
    """

    lipschitz_c: float
    builtin: str = "zero"
    scale: float = 1.0
    n2: int = 1

    def __post_init__(self):
        if self.lipschitz_c <= 0:
            raise ConfigError("functional Lipschitz constant must be positive")
        if self.builtin not in ("zero", "nu_average", "endpoint_linear"):
            raise ConfigError(f"unknown functional builtin {self.builtin!r}")

    @staticmethod
    def sharp_constant(builtin: str, scale: float, nu: DelayMeasure) -> float:
        """Smallest valid Lipschitz constant for a builtin (Cauchy-Schwarz)."""
        if builtin == "zero":
            return 0.0
        if builtin == "nu_average":
            return abs(scale) * math.sqrt(nu.mass)
        return abs(scale)

    def evaluate(self, node_values: np.ndarray, endpoint: np.ndarray,
                 nu: DelayMeasure) -> np.ndarray:
        """Vectorized evaluation over a batch of segments.

        node_values : (m, n_nodes, dim) segment values at the measure nodes
        endpoint    : (m, dim) segment value at time 0
        """
        m = endpoint.shape[0]
        if self.builtin == "zero":
            return np.zeros((m, self.n2))
        y_slice = slice(endpoint.shape[1] - self.n2, endpoint.shape[1])
        if self.builtin == "nu_average":
            return self.scale * np.einsum("j,mjd->md", nu.weights,
                                          node_values[:, :, y_slice])
        return self.scale * endpoint[:, y_slice]


def eval_coefficients(b: HolderDiniDrift, f: SegmentFunctional,
                      z_now: np.ndarray, seg: SegmentPath,
                      nu: DelayMeasure) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate (b(z), F(segment)) at a single state/segment pair."""
    z_now = np.asarray(z_now, dtype=float)
    n2 = b.n2
    n1 = z_now.size - n2
    if n1 < 0 or seg.dim != z_now.size:
        raise DimensionMismatch("state/segment dimensions do not match the coefficients")
    bx = b(z_now[None, :n1], z_now[None, n1:])[0]
    nodes = np.stack([seg.value_at(t) for t in nu.nodes]) if nu.nodes.size else \
        np.zeros((0, seg.dim))
    fv = f.evaluate(nodes[None, :, :], seg.endpoint()[None, :], nu)[0]
    return bx, fv


def _segment_batch(rng: np.random.Generator, kind: str, n: int, n_nodes: int,
                   dim: int, spread: float):
    """Random segment increments used by the sampled Lipschitz check.

    "constant" keeps one value across nodes and endpoint, "nodes_only" puts a
    common value on the nodes and zero at the endpoint (the extremal shape for
    the measure-average functional), "rough" is independent per node.
    """
    if kind == "constant":
        v = spread * rng.standard_normal((n, 1, dim))
        return np.repeat(v, n_nodes, axis=1), v[:, 0, :]
    if kind == "nodes_only":
        v = spread * rng.standard_normal((n, 1, dim))
        return np.repeat(v, n_nodes, axis=1), np.zeros((n, dim))
    nodes = spread * rng.standard_normal((n, n_nodes, dim))
    return nodes, spread * rng.standard_normal((n, dim))


def check_drift_moduli(b: HolderDiniDrift, f: SegmentFunctional, nu: DelayMeasure,
                       n_samples: int = 2000, seed: int = 0,
                       spread: float = 0.5, n1: int | None = None) -> dict:
    """Sample the continuity conditions and report worst violation ratios.

    The conditions are universally quantified, so this is a falsification
    search: pass means no sampled pair exceeded its bound by more than 1e-9
    relative.  ``spread`` controls the sampling scale of the state pairs; the
    report records it so failures are reproducible.
    """
    rng = np.random.default_rng(seed)
    n2 = b.n2
    n1 = n2 if n1 is None else n1

    x1 = spread * rng.standard_normal((n_samples, n1))
    x2 = x1 + spread * rng.standard_normal((n_samples, n1))
    y1 = spread * rng.standard_normal((n_samples, n2))
    y2 = y1 + spread * rng.standard_normal((n_samples, n2))
    lhs = np.linalg.norm(b(x1, y1) - b(x2, y2), axis=1)
    rhs = (b.k_holder * np.linalg.norm(x1 - x2, axis=1) ** b.alpha
           + dini_phi(np.linalg.norm(y1 - y2, axis=1), b.modulus))
    ok = rhs > 0
    drift_ratio = float(np.max(lhs[ok] / rhs[ok], initial=0.0))

    sup_seen = float(np.max(np.linalg.norm(b(x1, y1), axis=1), initial=0.0))

    n_nodes = max(1, nu.nodes.size)
    dim = n1 + n2
    func_ratio = 0.0
    per_shape = {}
    n_each = max(1, n_samples // 3)
    for kind in ("constant", "nodes_only", "rough"):
        d_nodes, d_end = _segment_batch(rng, kind, n_each, n_nodes, dim, spread)
        base_nodes = spread * rng.standard_normal((n_each, n_nodes, dim))
        base_end = spread * rng.standard_normal((n_each, dim))
        fa = f.evaluate(base_nodes, base_end, nu)
        fb = f.evaluate(base_nodes + d_nodes, base_end + d_end, nu)
        diff = np.linalg.norm(fa - fb, axis=1)
        norms = np.sqrt(np.einsum("j,mj->m", nu.weights,
                                  np.einsum("mjd,mjd->mj", d_nodes, d_nodes))
                        + np.einsum("md,md->m", d_end, d_end))
        ok = norms > 0
        ratio = float(np.max(diff[ok] / (f.lipschitz_c * norms[ok]), initial=0.0))
        per_shape[kind] = ratio
        func_ratio = max(func_ratio, ratio)

    tol = 1.0 + 1e-9
    return {
        "passed": drift_ratio <= tol and func_ratio <= tol and sup_seen <= b.sup_bound + 1e-12,
        "drift": {"max_ratio": drift_ratio, "n_samples": n_samples},
        "functional": {"max_ratio": func_ratio, "per_shape": per_shape},
        "boundedness": {"max_seen": sup_seen, "sup_bound": b.sup_bound},
        "seed": seed,
        "spread": spread,
    }
