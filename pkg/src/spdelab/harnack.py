"""Monte Carlo verification of the Harnack-type inequalities.

Everything here reduces to four kinds of runs: a plain run from the base
point, a plain run from a shifted start, a coupled run with its exponential
weight, and (for the no-delay shift inequalities) a plain run evaluated on a
shifted functional.  Runs are cached per (start, stream) so a grid of
inequality cells shares them; pass/fail is a one-sided z-test on the slack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .coefficients import HolderDiniDrift, SegmentFunctional
from .coupling import (BoundConstants, GirsanovLedger, HarnackPlan, ShiftPlan,
                       explicit_bound)
from .engine import (PathResult, SimGrid, STREAM_AUX, STREAM_BASE, STREAM_DIRECT,
                     STREAM_REFERENCE, run_paths)
from .errors import DomainError
from .model import DelayMeasure, OperatorSet, SegmentPath

__all__ = [
    "MCEstimate",
    "InequalityReport",
    "TestFunctional",
    "default_functional_family",
    "RunCache",
    "mc_functional",
    "verify_measure_transfer",
    "verify_harnack",
    "calibrate_bound_constant",
]


@dataclass(frozen=True)
class MCEstimate:
    """Sample mean with its standard error; reproducible from the run seed."""

    mean: float
    std_error: float
    n_paths: int
    confidence_z: float = 3.0

    @staticmethod
    def from_values(values: np.ndarray, z: float = 3.0) -> "MCEstimate":
        n = values.size
        se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return MCEstimate(mean=float(values.mean()), std_error=se,
                          n_paths=n, confidence_z=z)


@dataclass(frozen=True)
class InequalityReport:
    """One verified inequality cell: estimates, slack, and the explicit bound."""

    kind: str
    shift_size: float
    lhs: MCEstimate
    rhs: MCEstimate
    slack: float
    passed: bool
    bound_value: float          # explicit four-term bound at the configured C
    bound_used: float           # bound actually added on the right-hand side
    bound_estimate: MCEstimate | None = None   # sharp intermediate estimate
    p: float | None = None
    functional: str = ""


# ---------------------------------------------------------------------------
# bounded positive test functionals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestFunctional:
    """Bounded positive functional of a terminal segment.

    tags: "one", "gauss_endpoint", "gauss_segment", "coord", "sq_norm".
    Values are floored at ``floor`` so logarithms stay bounded; ``offset``
    shifts the argument (used for the shifted-function inequalities).
    """

    tag: str
    center: np.ndarray | None = None
    width: float = 4.0
    coord: int = 0
    bias: float = 1.0
    cap: float = 100.0
    floor: float = 1e-6
    offset: np.ndarray | None = None

    def label(self) -> str:
        return self.tag

    def with_offset(self, offset: np.ndarray) -> "TestFunctional":
        return replace(self, offset=np.asarray(offset, dtype=float))

    def evaluate(self, nodes: np.ndarray, endpoint: np.ndarray,
                 nu: DelayMeasure) -> np.ndarray:
        """Vectorized values over a batch of terminal segments."""
        if self.offset is not None:
            endpoint = endpoint + self.offset[None, :]
            nodes = nodes + self.offset[None, None, :]
        if self.tag == "one":
            return np.ones(endpoint.shape[0])
        if self.tag == "gauss_endpoint":
            c = self.center if self.center is not None else np.zeros(endpoint.shape[1])
            d = endpoint - c[None, :]
            raw = np.exp(-np.einsum("ij,ij->i", d, d) / self.width)
        elif self.tag == "gauss_segment":
            c = self.center if self.center is not None else np.zeros(endpoint.shape[1])
            de = endpoint - c[None, :]
            dn = nodes - c[None, None, :]
            sq = np.einsum("ij,ij->i", de, de) + np.einsum(
                "j,ijd,ijd->i", nu.weights, dn, dn)
            raw = np.exp(-sq / self.width)
        elif self.tag == "coord":
            raw = np.clip(endpoint[:, self.coord] + self.bias, 0.0, self.cap)
        elif self.tag == "sq_norm":
            raw = np.clip(np.einsum("ij,ij->i", endpoint, endpoint), 0.0, self.cap)
        else:
            raise DomainError(f"unknown functional tag {self.tag!r}")
        return np.maximum(raw, self.floor)


def default_functional_family(dim: int, floor: float = 1e-6) -> list[TestFunctional]:
    """The five bounded positive functionals used by the law-transfer check."""
    far = np.zeros(dim)
    far[0] = 0.5
    far[-1] = -0.5
    return [
        TestFunctional(tag="gauss_endpoint", width=4.0, floor=floor),
        TestFunctional(tag="gauss_endpoint", center=far, width=2.0, floor=floor),
        TestFunctional(tag="gauss_segment", width=8.0, floor=floor),
        TestFunctional(tag="coord", coord=dim - 1, bias=1.0, cap=2.0, floor=floor),
        TestFunctional(tag="sq_norm", cap=100.0, floor=floor),
    ]


# ---------------------------------------------------------------------------
# cached runs
# ---------------------------------------------------------------------------

class RunCache:
    """Shares simulation output across inequality cells of one experiment."""

    def __init__(self, ops: OperatorSet, b: HolderDiniDrift, f: SegmentFunctional,
                 nu: DelayMeasure, grid: SimGrid, threads: int = 1):
        self.ops = ops
        self.b = b
        self.f = f
        self.nu = nu
        self.grid = grid
        self.threads = threads
        self._plain: dict = {}
        self._coupled: dict = {}

    @staticmethod
    def _seg_key(xi: SegmentPath) -> bytes:
        return xi.values.tobytes()

    def plain(self, xi0: SegmentPath, stream: int) -> PathResult:
        key = (self._seg_key(xi0), stream)
        if key not in self._plain:
            self._plain[key] = run_paths(self.ops, self.b, self.f, self.nu, xi0,
                                         self.grid, stream=stream,
                                         threads=self.threads)
        return self._plain[key]

    def coupled(self, xi0: SegmentPath, plan, stream: int = STREAM_REFERENCE):
        key = (self._seg_key(xi0), id(plan), stream)
        if key not in self._coupled:
            n_hist = int(round(plan.r / self.grid.dt))
            tables = plan.tables(n_hist)
            res = run_paths(self.ops, self.b, self.f, self.nu, xi0, self.grid,
                            stream=stream, tables=tables, threads=self.threads)
            self._coupled[key] = res
        return self._coupled[key]


def mc_functional(cache: RunCache, functional: TestFunctional, xi0: SegmentPath, *,
                  weight_plan=None, stream: int | None = None,
                  z: float = 3.0) -> MCEstimate:
    """Monte Carlo estimate of the functional's mean at the terminal time.

    Without a plan this is the plain estimate of the semigroup value; with a
    plan it is the weighted estimate over the coupled copy, whose mean equals
    a directly simulated run from the plan's target by the change of measure.
    """
    if weight_plan is None:
        res = cache.plain(xi0, STREAM_REFERENCE if stream is None else stream)
        vals = functional.evaluate(res.terminal_nodes, res.terminal_endpoint, cache.nu)
    else:
        res = cache.coupled(xi0, weight_plan,
                            STREAM_REFERENCE if stream is None else stream)
        vals = np.exp(res.log_r) * functional.evaluate(
            res.coupled_nodes, res.coupled_endpoint, cache.nu)
    return MCEstimate.from_values(vals, z=z)


# ---------------------------------------------------------------------------
# law transfer
# ---------------------------------------------------------------------------

def verify_measure_transfer(cache: RunCache, plan, xi0: SegmentPath,
                            functionals: list[TestFunctional], *,
                            z: float = 3.0) -> dict:
    """Weighted estimates against an independent direct simulation.

    Delay coupling: the weighted mean over the coupled copy must match a run
    started at the shifted segment.  Shift coupling: it must match the plain
    run from the same start.  Streams are disjoint so the comparison is a true
    two-sample test.
    """
    coupled = cache.coupled(xi0, plan, STREAM_REFERENCE)
    weights = np.exp(coupled.log_r)
    if isinstance(plan, HarnackPlan):
        start_direct = xi0.shifted_by(plan.h)
    else:
        start_direct = xi0
    direct = cache.plain(start_direct, STREAM_DIRECT)

    rows = []
    for fn in functionals:
        wv = weights * fn.evaluate(coupled.coupled_nodes, coupled.coupled_endpoint,
                                   cache.nu)
        dv = fn.evaluate(direct.terminal_nodes, direct.terminal_endpoint, cache.nu)
        west, dest = MCEstimate.from_values(wv, z), MCEstimate.from_values(dv, z)
        diff = west.mean - dest.mean
        se = math.hypot(west.std_error, dest.std_error)
        rows.append({
            "functional": fn.label(),
            "weighted": west,
            "direct": dest,
            "diff": diff,
            "combined_se": se,
            "passed": abs(diff) <= z * se,
        })
    return {"passed": all(r["passed"] for r in rows), "rows": rows,
            "kind": plan.kind, "z": z}


# ---------------------------------------------------------------------------
# inequality checks
# ---------------------------------------------------------------------------

def _weighted_bound_estimates(res: PathResult, z: float):
    """Sharp intermediate quantities from a coupled run's ledger."""
    r = np.exp(res.log_r)
    e_r = MCEstimate.from_values(r, z)
    e_rlogr = MCEstimate.from_values(r * res.log_r, z)
    ess_sup = float(np.max(res.int_psi_sq))
    return e_r, e_rlogr, ess_sup


def verify_harnack(cache: RunCache, kind: str, functional: TestFunctional,
                   xi0: SegmentPath, plan, constants: BoundConstants, *,
                   p: float = 2.0, z: float = 3.0) -> InequalityReport:
    """One-sided Monte Carlo check of one inequality cell.

    kind "log"/"power": delay coupling, comparing a shifted start against the
    base start.  kind "shift_log"/"shift_power": no-delay coupling, comparing
    against the shifted functional at the same start.  The right-hand side
    uses the sharper of the measured intermediate bound and the explicit
    four-term bound at the configured constant.
    """
    if kind in ("power", "shift_power") and p <= 1.0:
        raise ValueError("power inequalities need p > 1")
    ops, nu, grid = cache.ops, cache.nu, cache.grid

    coupled = cache.coupled(xi0, plan, STREAM_REFERENCE)
    _, e_rlogr, ess_sup = _weighted_bound_estimates(coupled, z)

    if isinstance(plan, HarnackPlan):
        bound_value = explicit_bound("sigma", ops, plan.t_end, plan.r, plan.h,
                                     constants, nu=nu)
        shift_size = float(np.linalg.norm(plan.h.endpoint()))
        start_shift = xi0.shifted_by(plan.h)
    else:
        bound_value = explicit_bound("beta", ops, plan.t_end, 0.0, plan.eta, constants)
        shift_size = float(np.linalg.norm(plan.eta))
        start_shift = None

    if kind == "log":
        direct = cache.plain(start_shift, STREAM_DIRECT)
        lhs_vals = np.log(functional.evaluate(direct.terminal_nodes,
                                              direct.terminal_endpoint, nu))
        lhs = MCEstimate.from_values(lhs_vals, z)
        base = cache.plain(xi0, STREAM_BASE)
        fbase = MCEstimate.from_values(functional.evaluate(
            base.terminal_nodes, base.terminal_endpoint, nu), z)
        bound_used = min(e_rlogr.mean, bound_value)
        bound_se = e_rlogr.std_error if e_rlogr.mean <= bound_value else 0.0
        rhs = MCEstimate(mean=math.log(fbase.mean) + bound_used,
                         std_error=math.hypot(fbase.std_error / fbase.mean, bound_se),
                         n_paths=fbase.n_paths, confidence_z=z)
    elif kind == "power":
        direct = cache.plain(start_shift, STREAM_DIRECT)
        fdir = MCEstimate.from_values(functional.evaluate(
            direct.terminal_nodes, direct.terminal_endpoint, nu), z)
        lhs = MCEstimate(mean=fdir.mean ** p,
                         std_error=p * fdir.mean ** (p - 1) * fdir.std_error,
                         n_paths=fdir.n_paths, confidence_z=z)
        base = cache.plain(xi0, STREAM_BASE)
        fp = MCEstimate.from_values(functional.evaluate(
            base.terminal_nodes, base.terminal_endpoint, nu) ** p, z)
        bound_used = min(ess_sup, bound_value)
        factor = math.exp(p / (2.0 * (p - 1.0)) * bound_used)
        rhs = MCEstimate(mean=fp.mean * factor, std_error=fp.std_error * factor,
                         n_paths=fp.n_paths, confidence_z=z)
    elif kind == "shift_log":
        direct = cache.plain(xi0, STREAM_DIRECT)
        lhs = MCEstimate.from_values(np.log(functional.evaluate(
            direct.terminal_nodes, direct.terminal_endpoint, nu)), z)
        aux = cache.plain(xi0, STREAM_AUX)
        fshift = functional.with_offset(plan.target_displacement())
        fbase = MCEstimate.from_values(fshift.evaluate(
            aux.terminal_nodes, aux.terminal_endpoint, nu), z)
        bound_used = min(e_rlogr.mean, bound_value)
        bound_se = e_rlogr.std_error if e_rlogr.mean <= bound_value else 0.0
        rhs = MCEstimate(mean=math.log(fbase.mean) + bound_used,
                         std_error=math.hypot(fbase.std_error / fbase.mean, bound_se),
                         n_paths=fbase.n_paths, confidence_z=z)
    elif kind == "shift_power":
        direct = cache.plain(xi0, STREAM_DIRECT)
        fdir = MCEstimate.from_values(functional.evaluate(
            direct.terminal_nodes, direct.terminal_endpoint, nu), z)
        lhs = MCEstimate(mean=fdir.mean ** p,
                         std_error=p * fdir.mean ** (p - 1) * fdir.std_error,
                         n_paths=fdir.n_paths, confidence_z=z)
        aux = cache.plain(xi0, STREAM_AUX)
        fshift = functional.with_offset(plan.target_displacement())
        fp = MCEstimate.from_values(fshift.evaluate(
            aux.terminal_nodes, aux.terminal_endpoint, nu) ** p, z)
        bound_used = min(ess_sup, bound_value)
        factor = math.exp(p / (2.0 * (p - 1.0)) * bound_used)
        rhs = MCEstimate(mean=fp.mean * factor, std_error=fp.std_error * factor,
                         n_paths=fp.n_paths, confidence_z=z)
    else:
        raise ValueError(f"unknown inequality kind {kind!r}")

    slack = rhs.mean - lhs.mean
    combined = math.hypot(lhs.std_error, rhs.std_error)
    return InequalityReport(
        kind=kind, shift_size=shift_size, lhs=lhs, rhs=rhs, slack=slack,
        passed=slack >= -z * combined, bound_value=bound_value,
        bound_used=bound_used, bound_estimate=e_rlogr,
        p=p if "power" in kind else None, functional=functional.label(),
    )


# ---------------------------------------------------------------------------
# calibration of the structural constant
# ---------------------------------------------------------------------------

def calibrate_bound_constant(kind: str, ops: OperatorSet, cells: list,
                             constants: BoundConstants, *,
                             nu: DelayMeasure | None = None,
                             margin: float = 1.2) -> dict:
    """Smallest constant C making the explicit bound dominate measured values.

    ``cells`` is a list of ``(t_end, r, shift, measured)`` tuples, where
    ``measured`` is the sharp intermediate estimate for that cell (the mean of
    R log R, or the pathwise max of the squared-shift integral).  Every term
    of the bound is increasing in C, so bisection applies; the per-cell
    smallest constants are reported alongside the uniform one.
    """
    def covered(c: float, cell) -> bool:
        t_end, r, shift, measured = cell
        bound = explicit_bound(kind, ops, t_end, r, shift,
                               replace(constants, c=c), nu=nu)
        return bound >= margin * measured

    def smallest(cells_subset) -> float:
        lo, hi = 1e-8, 1.0
        while not all(covered(hi, cell) for cell in cells_subset):
            hi *= 4.0
            if hi > 1e12:
                raise ValueError("no constant below 1e12 covers the measured bounds")
        if all(covered(lo, cell) for cell in cells_subset):
            return lo
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            if all(covered(mid, cell) for cell in cells_subset):
                hi = mid
            else:
                lo = mid
            if hi / lo < 1.0 + 1e-9:
                break
        return hi

    uniform = smallest(cells)
    per_cell = [smallest([cell]) for cell in cells]
    return {"c": uniform, "per_cell": per_cell, "margin": margin, "kind": kind}
