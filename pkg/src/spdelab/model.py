"""Truncated spectral model: operator blocks, delay measure, segment geometry.

The state space is a product of three mode-truncated Hilbert spaces carrying
the drive operator pair (A1, B), the dissipative diagonal A2, the noise map Q,
and the commutation twist A0.  Every structural requirement on these operators
is an executable check here, and :func:`build_model` refuses to hand out an
operator set that fails one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import AssumptionViolation, ConfigError, GridMismatch, SingularGramian
from .linalg import adaptive_matrix_quad, expm, expm_at_times, spectral_norm

__all__ = [
    "TruncatedSpace",
    "OperatorSet",
    "KappaRule",
    "DelayMeasure",
    "SegmentPath",
    "build_model",
    "assumption_report",
    "semigroup_apply",
    "weighted_gramian",
    "segment_norm",
    "segment_inner",
    "check_measure_domination",
]

_PD_TOL = 1e-12          # smallest singular value considered invertible
_INTERTWINE_TOL = 1e-10
_COMMUTE_TOL = 1e-10
_GRAM_COND_MAX = 1e12


@dataclass(frozen=True)
class TruncatedSpace:
    """Mode counts, eigenvalues of the dissipative block, and the trace proxy.

    ``growth`` records how the eigenvalue sequence would continue beyond the
    truncation ("poly", q) or ("explicit", None); the trace-class condition is
    checked against that law since a finite truncation alone cannot decide it.
    """

    n1: int
    n2: int
    n3: int
    eigenvalues: np.ndarray
    epsilon: float
    growth: tuple = ("explicit", None)

    def __post_init__(self):
        object.__setattr__(self, "eigenvalues",
                           np.ascontiguousarray(self.eigenvalues, dtype=float))

    @property
    def partial_trace(self) -> float:
        """Truncated sum of eigenvalue^(epsilon - 1)."""
        return float(np.sum(self.eigenvalues ** (self.epsilon - 1.0)))


@dataclass(frozen=True)
class OperatorSet:
    """Validated operator blocks of the linear skeleton."""

    space: TruncatedSpace
    a1: np.ndarray
    a2: np.ndarray
    b: np.ndarray
    q: np.ndarray
    a0: np.ndarray
    delta: float

    def __post_init__(self):
        for name in ("a1", "a2", "b", "q", "a0"):
            object.__setattr__(self, name,
                               np.ascontiguousarray(getattr(self, name), dtype=float))

    @property
    def dim(self) -> int:
        return self.space.n1 + self.space.n2

    @property
    def drift_matrix(self) -> np.ndarray:
        """Block matrix [[A1, B], [0, A2]] of the joint linear drift."""
        n1, n2 = self.space.n1, self.space.n2
        m = np.zeros((n1 + n2, n1 + n2))
        m[:n1, :n1] = self.a1
        m[:n1, n1:] = self.b
        m[n1:, n1:] = self.a2
        return m

    @property
    def noise_matrix(self) -> np.ndarray:
        """Block matrix [[0], [Q]] feeding noise into the second component."""
        n1, n2 = self.space.n1, self.space.n2
        m = np.zeros((n1 + n2, self.space.n3))
        m[n1:, :] = self.q
        return m


# ---------------------------------------------------------------------------
# assumption checks
# ---------------------------------------------------------------------------

def _leading_mode_projector(basis: np.ndarray, n: int) -> np.ndarray:
    """Orthogonal projector onto the span of the first n columns."""
    u, s, _ = np.linalg.svd(basis[:, :n], full_matrices=False)
    rank = int(np.sum(s > 1e-12 * (s[0] if s.size else 1.0)))
    u = u[:, :rank]
    return u @ u.T


def assumption_report(ops: OperatorSet, t_max: float = 2.0) -> list[dict]:
    """Evaluate every structural condition and return one record per check.

    Records carry ``condition``, ``passed``, ``residual`` and ``detail`` and
    are ordered so that the first failure is the most fundamental one.
    """
    sp = ops.space
    checks: list[dict] = []

    lam = sp.eigenvalues
    ordered = lam.size == sp.n2 and np.all(lam > 0) and np.all(np.diff(lam) >= 0)
    checks.append({
        "condition": "eigenvalues_positive_ordered",
        "passed": bool(ordered),
        "residual": float(np.min(lam, initial=np.inf)),
        "detail": "eigenvalues of the dissipative block must be positive and non-decreasing",
    })

    # trace proxy: partial sum is always finite; for a polynomial growth law
    # the tail converges iff power * (1 - epsilon) > 1
    law, law_param = sp.growth
    tail_ok = True
    if law == "poly":
        tail_ok = law_param * (1.0 - sp.epsilon) > 1.0
    checks.append({
        "condition": "trace_class_proxy",
        "passed": bool(0.0 < sp.epsilon < 1.0 and tail_ok),
        "residual": sp.partial_trace,
        "detail": f"partial trace sum={sp.partial_trace:.6g}, growth law={law}",
    })

    qq = ops.q @ ops.q.T
    smin_q = float(np.linalg.svd(qq, compute_uv=False)[-1]) if qq.size else 0.0
    checks.append({
        "condition": "noise_gram_invertible",
        "passed": smin_q > _PD_TOL,
        "residual": smin_q,
        "detail": "smallest singular value of Q Q^T",
    })

    bb = ops.b @ ops.b.T
    smin_b = float(np.linalg.svd(bb, compute_uv=False)[-1]) if bb.size else 0.0
    checks.append({
        "condition": "drive_gram_invertible",
        "passed": smin_b > _PD_TOL,
        "residual": smin_b,
        "detail": "smallest singular value of B B^T",
    })

    ts = np.linspace(0.0, t_max, 17)
    e2 = expm_at_times(ops.a2, ts)
    e1 = expm_at_times(ops.a1, ts)
    e0 = expm_at_times(ops.a0, ts)
    resid = max(
        spectral_norm(ops.b @ e2[i] - e1[i] @ e0[i] @ ops.b) for i in range(ts.size)
    )
    checks.append({
        "condition": "intertwine",
        "passed": resid <= _INTERTWINE_TOL,
        "residual": resid,
        "detail": "max_t || B e^{A2 t} - e^{A1 t} e^{A0 t} B ||",
    })

    # leading-mode projectors commute with A1 and B from some level n0 on
    worst = np.zeros(sp.n2)
    for n in range(1, sp.n2 + 1):
        p2 = np.zeros((sp.n2, sp.n2))
        p2[:n, :n] = np.eye(n)
        p1 = _leading_mode_projector(ops.b, n)
        worst[n - 1] = max(spectral_norm(p1 @ ops.b - ops.b @ p2),
                           spectral_norm(p1 @ ops.a1 - ops.a1 @ p1))
    n0 = None
    for n in range(1, sp.n2 + 1):
        if np.all(worst[n - 1:] <= _COMMUTE_TOL):
            n0 = n
            break
    checks.append({
        "condition": "projection_commute",
        "passed": n0 is not None,
        "residual": float(worst[-1]),
        "detail": f"smallest commuting truncation level n0={n0}",
    })

    sym = 0.5 * (ops.a1 + ops.a1.T)
    top = float(np.linalg.eigvalsh(sym)[-1])
    bound = ops.delta - float(lam[0])
    checks.append({
        "condition": "drift_dissipativity",
        "passed": ops.delta > 0 and top <= bound + 1e-10,
        "residual": top - bound,
        "detail": "largest eigenvalue of sym(A1) minus (delta - lambda_1)",
    })

    try:
        g = weighted_gramian(ops, "plain", max(t_max, 1.0))
        cond = float(np.linalg.cond(g))
        ok = cond < _GRAM_COND_MAX
    except SingularGramian:
        cond, ok = float("inf"), False
    checks.append({
        "condition": "gram_invertible",
        "passed": ok,
        "residual": cond,
        "detail": "condition number of the plain controllability Gramian",
    })

    return checks


def _as_matrix(spec, rows: int, cols: int, name: str) -> np.ndarray:
    if isinstance(spec, str):
        if spec == "identity":
            if rows != cols:
                raise ConfigError(f"{name}: 'identity' needs a square shape, got {rows}x{cols}")
            return np.eye(rows)
        if spec == "zero":
            return np.zeros((rows, cols))
        raise ConfigError(f"{name}: unknown matrix tag {spec!r}")
    if isinstance(spec, (int, float)):
        if rows != cols:
            raise ConfigError(f"{name}: scalar spec needs a square shape")
        return float(spec) * np.eye(rows)
    m = np.asarray(spec, dtype=float)
    if m.shape != (rows, cols):
        raise ConfigError(f"{name}: expected shape {(rows, cols)}, got {m.shape}")
    return m


def build_model(model_cfg: dict) -> OperatorSet:
    """Construct and validate the operator set from a model-block dict.

    Raises :class:`AssumptionViolation` naming the first failed structural
    check.  Identical input dicts produce bit-identical operator sets.
    """
    n1 = int(model_cfg.get("n1", 4))
    n2 = int(model_cfg.get("n2", 4))
    n3 = int(model_cfg.get("n3", 4))
    if min(n1, n2, n3) < 1:
        raise ConfigError("mode counts must be >= 1")

    eig_cfg = model_cfg.get("eigenvalues", {"law": "poly", "power": 2.0})
    law = eig_cfg.get("law", "poly")
    if law == "poly":
        power = float(eig_cfg.get("power", 2.0))
        lam = np.arange(1, n2 + 1, dtype=float) ** power
        growth = ("poly", power)
    elif law == "explicit":
        lam = np.asarray(eig_cfg["values"], dtype=float)
        if lam.size != n2:
            raise ConfigError("explicit eigenvalue list must have n2 entries")
        growth = ("explicit", None)
    else:
        raise ConfigError(f"unknown eigenvalue law {law!r}")

    space = TruncatedSpace(
        n1=n1, n2=n2, n3=n3, eigenvalues=lam,
        epsilon=float(model_cfg.get("trace_exponent", 0.25)),
        growth=growth,
    )

    a2 = -np.diag(lam)
    a1_spec = model_cfg.get("a1", "a2")
    if isinstance(a1_spec, str) and a1_spec == "a2":
        if n1 != n2:
            raise ConfigError("a1='a2' requires n1 == n2")
        a1 = a2.copy()
    else:
        a1 = _as_matrix(a1_spec, n1, n1, "a1")

    b = _as_matrix(model_cfg.get("b", "identity"), n1, n2, "b")
    q = _as_matrix(model_cfg.get("q", "identity"), n2, n3, "q")

    a0_spec = model_cfg.get("a0", "auto")
    if isinstance(a0_spec, str) and a0_spec == "auto":
        bbt = b @ b.T
        try:
            pinv_right = b.T @ np.linalg.inv(bbt)
        except np.linalg.LinAlgError:
            pinv_right = np.linalg.pinv(b)
        a0 = (b @ a2 - a1 @ b) @ pinv_right
        a0[np.abs(a0) < 1e-13] = 0.0
    else:
        a0 = _as_matrix(a0_spec, n1, n1, "a0")

    ops = OperatorSet(space=space, a1=a1, a2=a2, b=b, q=q, a0=a0,
                      delta=float(model_cfg.get("delta", 0.5)))

    for check in assumption_report(ops):
        if not check["passed"]:
            raise AssumptionViolation(check["condition"], check["detail"],
                                      residual=check["residual"])
    return ops


# ---------------------------------------------------------------------------
# semigroups and Gramians
# ---------------------------------------------------------------------------

def semigroup_apply(a: np.ndarray, t: float, v: np.ndarray) -> np.ndarray:
    """Apply ``e^{A t}`` to a vector for t >= 0."""
    if t < 0:
        raise ValueError("semigroup time must be nonnegative")
    return expm(np.asarray(a, dtype=float) * t) @ np.asarray(v, dtype=float)


def weighted_gramian(ops: OperatorSet, kind: str, horizon: float) -> np.ndarray:
    """Controllability Gramian of (A0, B) with the coupling's time weight.

    kind "plain"  : int_0^H e^{sA0} B B^T e^{sA0^T} ds
    kind "harnack": int_0^H s (H - s) e^{sA0} B B^T e^{sA0^T} ds   (H = T - r)
    kind "shift"  : same weight with H = T

    Computed by adaptive Gauss-Legendre quadrature to 1e-12 relative accuracy.
    """
    if horizon <= 0:
        raise ValueError("gramian horizon must be positive")
    if kind not in ("plain", "harnack", "shift"):
        raise ValueError(f"unknown gramian kind {kind!r}")
    bbt = ops.b @ ops.b.T

    def integrand(ss: np.ndarray) -> np.ndarray:
        es = expm_at_times(ops.a0, ss)
        out = np.einsum("tij,jk,tlk->til", es, bbt, es)
        if kind != "plain":
            out = out * (ss * (horizon - ss))[:, None, None]
        return out

    g = adaptive_matrix_quad(integrand, 0.0, horizon, rel_tol=1e-12)
    cond = float(np.linalg.cond(g))
    if not np.isfinite(cond) or cond > _GRAM_COND_MAX:
        raise SingularGramian(f"{kind} gramian at horizon {horizon:g} is singular", cond=cond)
    return g


# ---------------------------------------------------------------------------
# delay measure and segments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KappaRule:
    """Increasing domination function on (0, r]: tagged closed forms."""

    tag: str = "one"
    rate: float = 0.0
    value: float = 1.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.tag == "one":
            return np.ones_like(t)
        if self.tag == "exp":
            return np.maximum(1.0, np.exp(-self.rate * t))
        if self.tag == "const":
            return np.full_like(t, self.value)
        raise ConfigError(f"unknown kappa tag {self.tag!r}")


@dataclass(frozen=True)
class DelayMeasure:
    """History-weighting measure discretized on grid-aligned nodes in [-r, 0].

    ``nodes``/``weights`` carry the quadrature masses of the measure on
    [-r, 0); the segment norm adds the endpoint value separately.  Atoms must
    sit on simulation-grid times.  The degenerate no-delay case is a single
    node at 0 with weight 0.
    """

    r: float
    nodes: np.ndarray
    weights: np.ndarray
    kappa: KappaRule = field(default_factory=KappaRule)
    expected_mass: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.ascontiguousarray(self.nodes, dtype=float))
        object.__setattr__(self, "weights", np.ascontiguousarray(self.weights, dtype=float))
        if self.nodes.shape != self.weights.shape:
            raise ConfigError("delay nodes and weights must have equal length")
        if np.any(self.weights < 0):
            raise ConfigError("delay weights must be nonnegative")
        if self.nodes.size and (self.nodes.min() < -self.r - 1e-12 or self.nodes.max() > 1e-12):
            raise ConfigError("delay nodes must lie in [-r, 0]")

    @property
    def mass(self) -> float:
        return float(np.sum(self.weights))

    @property
    def no_delay(self) -> bool:
        return self.r == 0.0

    # -- constructors -------------------------------------------------------

    @staticmethod
    def no_delay_measure() -> "DelayMeasure":
        return DelayMeasure(r=0.0, nodes=np.array([0.0]), weights=np.array([0.0]),
                            expected_mass=0.0)

    @staticmethod
    def lebesgue(r: float, n_nodes: int, kappa: KappaRule | None = None) -> "DelayMeasure":
        """Uniform density on [-r, 0), midpoint quadrature."""
        if r == 0.0:
            return DelayMeasure.no_delay_measure()
        step = r / n_nodes
        nodes = -r + (np.arange(n_nodes) + 0.5) * step
        w = np.full(n_nodes, step)
        return DelayMeasure(r=r, nodes=nodes, weights=w,
                            kappa=kappa or KappaRule("one"), expected_mass=r)

    @staticmethod
    def exponential(r: float, rate: float, n_nodes: int,
                    kappa: KappaRule | None = None) -> "DelayMeasure":
        """Density e^{rate * theta} on [-r, 0), midpoint quadrature."""
        if r == 0.0:
            return DelayMeasure.no_delay_measure()
        step = r / n_nodes
        nodes = -r + (np.arange(n_nodes) + 0.5) * step
        w = np.exp(rate * nodes) * step
        if abs(rate) > 1e-14:
            total = (1.0 - math.exp(-rate * r)) / rate
        else:
            total = r
        return DelayMeasure(r=r, nodes=nodes, weights=w,
                            kappa=kappa or KappaRule("exp", rate=rate),
                            expected_mass=total)

    @staticmethod
    def atoms(r: float, positions, masses, kappa: KappaRule | None = None) -> "DelayMeasure":
        return DelayMeasure(r=r, nodes=np.asarray(positions, dtype=float),
                            weights=np.asarray(masses, dtype=float),
                            kappa=kappa or KappaRule("one"),
                            expected_mass=float(np.sum(masses)))


@dataclass(frozen=True)
class SegmentPath:
    """History window on [-r, 0], values on simulation-grid times.

    Values are read only at grid nodes ("grid" interpolation): the delay
    measure is built so its atoms always sit on this grid.
    """

    times: np.ndarray
    values: np.ndarray
    interpolation: str = "grid"

    def __post_init__(self):
        object.__setattr__(self, "times", np.ascontiguousarray(self.times, dtype=float))
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=float))
        if self.times.ndim != 1 or self.values.shape[0] != self.times.size:
            raise ConfigError("segment values must align with segment times")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("segment values must be finite")
        if self.times.size == 0 or abs(self.times[-1]) > 1e-12:
            raise ConfigError("segment must end at time 0")

    @property
    def r(self) -> float:
        return float(-self.times[0])

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def value_at(self, t: float) -> np.ndarray:
        idx = np.searchsorted(self.times, t)
        for j in (idx - 1, idx, idx + 1):
            if 0 <= j < self.times.size and abs(self.times[j] - t) <= 1e-9:
                return self.values[j]
        raise GridMismatch(f"time {t:g} is not on the segment grid")

    def endpoint(self) -> np.ndarray:
        return self.values[-1]

    def shifted_by(self, other: "SegmentPath") -> "SegmentPath":
        """Pointwise sum with another segment on the same grid."""
        if self.times.size != other.times.size or \
                np.max(np.abs(self.times - other.times)) > 1e-9:
            raise GridMismatch("segments live on different grids")
        return SegmentPath(times=self.times, values=self.values + other.values,
                           interpolation=self.interpolation)

    @staticmethod
    def constant(r: float, dt: float, value) -> "SegmentPath":
        value = np.asarray(value, dtype=float)
        n = int(round(r / dt)) if r > 0 else 0
        times = -dt * np.arange(n, -1, -1, dtype=float)
        return SegmentPath(times=times, values=np.tile(value, (n + 1, 1)))

    @staticmethod
    def zero(r: float, dt: float, dim: int) -> "SegmentPath":
        return SegmentPath.constant(r, dt, np.zeros(dim))

    @staticmethod
    def from_function(r: float, dt: float, fn: Callable[[float], np.ndarray]) -> "SegmentPath":
        n = int(round(r / dt)) if r > 0 else 0
        times = -dt * np.arange(n, -1, -1, dtype=float)
        vals = np.stack([np.asarray(fn(t), dtype=float) for t in times])
        return SegmentPath(times=times, values=vals)


def segment_norm(xi: SegmentPath, nu: DelayMeasure) -> float:
    """Hilbert norm of a segment: sqrt(sum_j w_j |xi(theta_j)|^2 + |xi(0)|^2)."""
    acc = float(np.dot(xi.endpoint(), xi.endpoint()))
    for theta, w in zip(nu.nodes, nu.weights):
        if w == 0.0:
            continue
        v = xi.value_at(theta)
        acc += w * float(np.dot(v, v))
    return math.sqrt(acc)


def segment_inner(xi: SegmentPath, eta: SegmentPath, nu: DelayMeasure) -> float:
    """Inner product inducing :func:`segment_norm`."""
    acc = float(np.dot(xi.endpoint(), eta.endpoint()))
    for theta, w in zip(nu.nodes, nu.weights):
        if w == 0.0:
            continue
        acc += w * float(np.dot(xi.value_at(theta), eta.value_at(theta)))
    return acc


def check_measure_domination(nu: DelayMeasure, t_grid) -> dict:
    """Verify the shifted-mass domination of the discretized measure.

    For each t in ``t_grid`` and every atom theta_j with theta_j + t < 0, the
    mass at theta_j must be covered by kappa(t) times the mass at the shifted
    position theta_j + t.  Failures are reported, not raised.
    """
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if np.any(t_grid <= 0) or np.any(t_grid > nu.r + 1e-12):
        raise ValueError("domination times must lie in (0, r]")
    rows = []
    overall = 0.0
    for t in t_grid:
        kap = float(nu.kappa(t))
        worst = 0.0
        for theta, w in zip(nu.nodes, nu.weights):
            if w == 0.0 or theta + t >= -1e-12:
                continue
            match = np.where(np.abs(nu.nodes - (theta + t)) <= 1e-9)[0]
            target = float(nu.weights[match[0]]) if match.size else 0.0
            ratio = math.inf if target == 0.0 else w / (kap * target)
            worst = max(worst, ratio)
        rows.append({"t": float(t), "kappa": kap, "worst_ratio": worst,
                     "passed": worst <= 1.0 + 1e-9})
        overall = max(overall, worst)
    return {
        "passed": all(row["passed"] for row in rows),
        "worst_ratio": overall,
        "per_t": rows,
    }
