"""Couplings by change of measure and their Girsanov bookkeeping.

Two closed-form couplings are built here.  The delay coupling starts a copy
at a shifted initial segment and steers it back onto the reference path by
the final time, so both share the terminal segment; the shift coupling starts
the copy at the same point and drives it onto a prescribed terminal
displacement.  In both cases the extra drift is deterministic, and the
exponential weight R realigns the copy's law with a directly simulated run.

Displacement tables are computed from the closed forms by per-step
Gauss-Legendre accumulation on the simulation grid (the integrands are smooth
products of polynomials and matrix exponentials), so the terminal-hit
identities hold to quadrature precision rather than to scheme order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coefficients import DiniModulus, HolderDiniDrift, SegmentFunctional, dini_phi
from .engine import (CouplingTables, SimGrid, Trajectory,
                     STREAM_REFERENCE, run_paths)
from .errors import HorizonError, PlanMismatch
from .linalg import adaptive_matrix_quad, expm, expm_at_times, int_expm, spectral_norm
from .model import DelayMeasure, OperatorSet, SegmentPath, segment_norm, weighted_gramian

__all__ = [
    "HarnackPlan",
    "ShiftPlan",
    "GirsanovLedger",
    "BoundConstants",
    "build_harnack_plan",
    "build_shift_plan",
    "simulate_coupled",
    "explicit_bound",
    "girsanov_log_weight",
]

_GL_ORDER = 8


def _step_nodes(dt: float, n_steps: int):
    """Per-step Gauss-Legendre abscissae/weights and their step fractions."""
    x, w = np.polynomial.legendre.leggauss(_GL_ORDER)
    frac = 0.5 * (x + 1.0)
    weights = 0.5 * dt * w
    s = (np.arange(n_steps)[:, None] + frac[None, :]) * dt
    return s.ravel(), frac, weights


def _int_expm_apply(a: np.ndarray, ts: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """(int_0^t e^{A s} ds) vec for every t, via solve when A is invertible."""
    mats = expm_at_times(a, ts)
    n = a.shape[0]
    rhs = (mats - np.eye(n)[None, :, :]) @ vec          # (nt, n)
    if np.linalg.cond(a) < 1e12:
        return np.linalg.solve(a, rhs.T).T
    out = np.empty((ts.size, n))
    for i, t in enumerate(ts):
        out[i] = (int_expm(a, float(t)) @ vec) if t > 0 else np.zeros(n)
    return out


@dataclass(frozen=True)
class GirsanovLedger:
    """Per-path running sums of the change-of-measure exponent.

    log R = -stoch_integral - quad_var / 2, with stoch_integral the
    accumulated pairing of the shift against the Brownian increments and
    quad_var the accumulated squared shift.
    """

    stoch_integral: np.ndarray
    quad_var: np.ndarray
    identity_residual: float = 0.0

    @property
    def log_r(self) -> np.ndarray:
        return -self.stoch_integral - 0.5 * self.quad_var


def girsanov_log_weight(ledger: GirsanovLedger) -> np.ndarray:
    """Terminal log-weights log R(T), one entry per path."""
    return ledger.log_r


# ---------------------------------------------------------------------------
# delay (Harnack) coupling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HarnackPlan:
    """Closed-form coupling data for a shifted initial segment.

    Tabulated on the simulation grid: steering vector ``e``, weighted Gramian,
    the drift pulse gamma and its derivative, the displacement components
    (first/second block), and the exact per-step forcing increments.
    """

    ops: OperatorSet
    t_end: float
    r: float
    dt: float
    h: SegmentPath
    e: np.ndarray
    gramian: np.ndarray
    times: np.ndarray          # (n_steps + 1,) from 0 to T
    gamma: np.ndarray          # (n_steps + 1, n2)
    gamma_dot: np.ndarray      # (n_steps + 1, n2), right-continuous at the kink
    disp1: np.ndarray          # (n_steps + 1, n1)
    disp2: np.ndarray          # (n_steps + 1, n2)
    forcing_point: np.ndarray  # (n_steps, n2)
    forcing_step: np.ndarray   # (n_steps, n2)
    gramian_residual: float = 0.0

    @property
    def kind(self) -> str:
        return "harnack"

    def terminal_displacement(self) -> np.ndarray:
        return np.concatenate([self.disp1[-1], self.disp2[-1]])

    def target_displacement(self) -> np.ndarray:
        """Displacement the plan is built to reach at the final time."""
        return np.zeros(self.ops.space.n1 + self.ops.space.n2)

    def terminal_error(self) -> float:
        return float(np.linalg.norm(self.terminal_displacement() - self.target_displacement()))

    def tables(self, n_hist: int) -> CouplingTables:
        n1 = self.ops.space.n1
        dim = n1 + self.ops.space.n2
        n_steps = self.times.size - 1
        gam = np.empty((n_hist + n_steps + 1, dim))
        if n_hist:
            gam[:n_hist, :] = self.h.values[:n_hist, :]
        gam[n_hist:, :n1] = self.disp1
        gam[n_hist:, n1:] = self.disp2
        return CouplingTables(gamma=gam, forcing_point=self.forcing_point,
                              forcing_step=self.forcing_step)


def _gamma2_closed(ops: OperatorSet, t_end: float, r: float, h2_0: np.ndarray,
                   e: np.ndarray, ss: np.ndarray) -> np.ndarray:
    """Second displacement block at arbitrary times (closed form)."""
    win = t_end - r
    pos = np.clip(win - ss, 0.0, None)
    gam = (ss * pos)[:, None] * (expm_at_times(ops.a0.T, ss) @ e) @ ops.b
    base = (pos / win)[:, None] * h2_0[None, :] + gam
    return np.einsum("tij,tj->ti", expm_at_times(ops.a2, ss), base)


def _disp1_accumulate(ops: OperatorSet, dt: float, n_steps: int,
                      bdisp2_nodes: np.ndarray, weights: np.ndarray,
                      frac: np.ndarray, start: np.ndarray) -> np.ndarray:
    """Mild recursion disp1(t+dt) = e^{A1 dt} disp1(t) + step integral."""
    e1dt = expm(ops.a1 * dt)
    eg = expm_at_times(ops.a1, dt * (1.0 - frac))      # (order, n1, n1)
    eg_w = eg * weights[:, None, None]
    out = np.empty((n_steps + 1, start.size))
    cur = start.copy()
    out[0] = cur
    for k in range(n_steps):
        inc = np.einsum("gij,gj->i", eg_w, bdisp2_nodes[k])
        cur = e1dt @ cur + inc
        out[k + 1] = cur
    return out


def build_harnack_plan(ops: OperatorSet, t_end: float, r: float,
                       h: SegmentPath, dt: float) -> HarnackPlan:
    """Steering data that returns a segment-shifted copy to the reference path.

    The steering vector solves the weighted-Gramian equation so the first
    displacement block vanishes from time T - r on; the second block vanishes
    there by construction of the drift pulse.
    """
    if t_end <= r:
        raise HorizonError("delay coupling needs a horizon longer than the delay")
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 or abs(round(r / dt) * dt - r) > 1e-9:
        raise PlanMismatch("horizon and delay must be exact multiples of dt")
    if abs(h.r - r) > 1e-9:
        raise PlanMismatch("shift segment must span exactly the delay window")

    n2 = ops.space.n2
    win = t_end - r
    h1_0 = h.endpoint()[:ops.space.n1]
    h2_0 = h.endpoint()[ops.space.n1:]

    gram = weighted_gramian(ops, "harnack", win)

    def ramp_integrand(ss):
        mats = expm_at_times(ops.a0, ss)
        return ((win - ss) / win)[:, None] * (mats @ (ops.b @ h2_0))

    ramp = adaptive_matrix_quad(ramp_integrand, 0.0, win, rel_tol=1e-13)
    rhs = -(h1_0 + ramp)
    e = np.linalg.solve(gram, rhs)
    gram_residual = float(np.linalg.norm(gram @ e - rhs))

    times = dt * np.arange(n_steps + 1)
    pos = np.clip(win - times, 0.0, None)
    e0t_e = expm_at_times(ops.a0.T, times) @ e          # (k, n1)
    b_e0t_e = e0t_e @ ops.b                             # B^T e^{A0^T t} e, (k, n2)
    gamma = (times * pos)[:, None] * b_e0t_e
    active = times < win - 1e-12
    # derivative of t (win - t) B^T e^{A0^T t} e, zero past the active window
    gamma_dot = np.where(active[:, None],
                         (win - 2.0 * times)[:, None] * b_e0t_e
                         + (times * pos)[:, None] * ((e0t_e @ ops.a0) @ ops.b),
                         0.0)

    disp2 = _gamma2_closed(ops, t_end, r, h2_0, e, times)

    s_nodes, frac, weights = _step_nodes(dt, n_steps)
    g2_nodes = _gamma2_closed(ops, t_end, r, h2_0, e, s_nodes)
    bdisp2 = (g2_nodes @ ops.b.T).reshape(n_steps, _GL_ORDER, -1)
    disp1 = _disp1_accumulate(ops, dt, n_steps, bdisp2, weights, frac, h1_0)

    e2t = expm_at_times(ops.a2, times)
    pulse = np.where(active[:, None], -h2_0[None, :] / win + gamma_dot, 0.0)
    forcing_point = np.einsum("tij,tj->ti", e2t[:-1], pulse[:-1])
    step_deltas = np.where((times[1:] <= win + 1e-12)[:, None],
                           -dt / win * h2_0[None, :], 0.0) + (gamma[1:] - gamma[:-1])
    forcing_step = np.einsum("tij,tj->ti", e2t[1:], step_deltas)

    return HarnackPlan(ops=ops, t_end=t_end, r=r, dt=dt, h=h, e=e, gramian=gram,
                       times=times, gamma=gamma, gamma_dot=gamma_dot,
                       disp1=disp1, disp2=disp2,
                       forcing_point=forcing_point, forcing_step=forcing_step,
                       gramian_residual=gram_residual)


# ---------------------------------------------------------------------------
# shift coupling (no delay)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShiftPlan:
    """Coupling data that creates a prescribed terminal displacement.

    ``eta_path`` is the flowed displacement (int_0^t e^{s A_i} eta_i ds); the
    copy is driven so its state equals the reference plus ``eta_path(T)`` at
    the final time, starting from the same point.
    """

    ops: OperatorSet
    t_end: float
    dt: float
    eta: np.ndarray
    e_tilde: np.ndarray
    gramian: np.ndarray
    times: np.ndarray
    eta_path: np.ndarray       # (n_steps + 1, n1 + n2)
    gamma: np.ndarray          # (n_steps + 1, n2)
    gamma_dot: np.ndarray
    disp1: np.ndarray
    disp2: np.ndarray
    forcing_point: np.ndarray
    forcing_step: np.ndarray
    gramian_residual: float = 0.0

    @property
    def kind(self) -> str:
        return "shift"

    @property
    def r(self) -> float:
        return 0.0

    def terminal_displacement(self) -> np.ndarray:
        return np.concatenate([self.disp1[-1], self.disp2[-1]])

    def target_displacement(self) -> np.ndarray:
        return self.eta_path[-1]

    def terminal_error(self) -> float:
        return float(np.linalg.norm(self.terminal_displacement() - self.target_displacement()))

    def tables(self, n_hist: int) -> CouplingTables:
        if n_hist != 0:
            raise PlanMismatch("shift coupling requires the no-delay setting")
        n1 = self.ops.space.n1
        gam = np.concatenate([self.disp1, self.disp2], axis=1)
        return CouplingTables(gamma=gam, forcing_point=self.forcing_point,
                              forcing_step=self.forcing_step)


def build_shift_plan(ops: OperatorSet, t_end: float, eta: np.ndarray,
                     dt: float) -> ShiftPlan:
    """Steering data that displaces the terminal state by the flowed shift."""
    if t_end <= 0:
        raise HorizonError("shift coupling needs a positive horizon")
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9:
        raise PlanMismatch("horizon must be an exact multiple of dt")
    n1, n2 = ops.space.n1, ops.space.n2
    eta = np.asarray(eta, dtype=float)
    eta1, eta2 = eta[:n1], eta[n1:]

    gram = weighted_gramian(ops, "shift", t_end)

    first = int_expm(-ops.a1, t_end) @ eta1

    def back_integrand(ss):
        eta2_path = _int_expm_apply(ops.a2, ss, eta2)          # (m, n2)
        return expm_at_times(-ops.a1, ss) @ ops.b @ eta2_path[..., None]

    back = adaptive_matrix_quad(lambda ss: np.squeeze(back_integrand(ss), -1),
                                0.0, t_end, rel_tol=1e-13)
    rhs = first - back
    e_t = np.linalg.solve(gram, rhs)
    gram_residual = float(np.linalg.norm(gram @ e_t - rhs))

    times = dt * np.arange(n_steps + 1)
    eta1_path = _int_expm_apply(ops.a1, times, eta1)
    eta2_path = _int_expm_apply(ops.a2, times, eta2)
    eta_path = np.concatenate([eta1_path, eta2_path], axis=1)

    e0t_e = expm_at_times(ops.a0.T, times) @ e_t
    b_e0t_e = e0t_e @ ops.b
    gamma = (times * (t_end - times))[:, None] * b_e0t_e
    gamma_dot = ((t_end - 2.0 * times)[:, None] * b_e0t_e
                 + (times * (t_end - times))[:, None] * ((e0t_e @ ops.a0) @ ops.b))

    e2t = expm_at_times(ops.a2, times)
    disp2 = eta2_path + np.einsum("tij,tj->ti", e2t, gamma)

    def disp2_at(ss):
        g = (ss * (t_end - ss))[:, None] * ((expm_at_times(ops.a0.T, ss) @ e_t) @ ops.b)
        return _int_expm_apply(ops.a2, ss, eta2) + np.einsum(
            "tij,tj->ti", expm_at_times(ops.a2, ss), g)

    s_nodes, frac, weights = _step_nodes(dt, n_steps)
    bdisp2 = (disp2_at(s_nodes) @ ops.b.T).reshape(n_steps, _GL_ORDER, -1)
    disp1 = _disp1_accumulate(ops, dt, n_steps, bdisp2, weights, frac, np.zeros(n1))

    forcing_point = eta2[None, :] + np.einsum("tij,tj->ti", e2t[:-1], gamma_dot[:-1])
    int_e2 = int_expm(ops.a2, dt)
    forcing_step = (int_e2 @ eta2)[None, :] + np.einsum(
        "tij,tj->ti", e2t[1:], gamma[1:] - gamma[:-1])

    return ShiftPlan(ops=ops, t_end=t_end, dt=dt, eta=eta, e_tilde=e_t,
                     gramian=gram, times=times, eta_path=eta_path,
                     gamma=gamma, gamma_dot=gamma_dot, disp1=disp1, disp2=disp2,
                     forcing_point=forcing_point, forcing_step=forcing_step,
                     gramian_residual=gram_residual)


# ---------------------------------------------------------------------------
# coupled simulation and the explicit bounds
# ---------------------------------------------------------------------------

def simulate_coupled(ops: OperatorSet, b: HolderDiniDrift, f: SegmentFunctional,
                     xi0: SegmentPath, nu: DelayMeasure,
                     plan: HarnackPlan | ShiftPlan, grid: SimGrid, *,
                     stream: int = STREAM_REFERENCE, threads: int = 1
                     ) -> tuple[Trajectory, Trajectory, GirsanovLedger]:
    """Simulate the reference path and its coupled copy with shared noise.

    The copy's noisy component is integrated from the coupled equation (same
    drift evaluated on the reference path plus the plan's exact forcing
    increments); its displacement from the reference must then reproduce the
    plan's tables, and the residual of that identity is reported on the
    ledger.  The deterministic component rides the tables directly.
    """
    if abs(grid.t_end - plan.t_end) > 1e-12 or abs(grid.dt - plan.dt) > 1e-12:
        raise PlanMismatch("plan horizon/step do not match the simulation grid")
    if abs(xi0.r - plan.r) > 1e-9:
        raise PlanMismatch("initial segment length does not match the plan")
    n_hist = int(round(plan.r / grid.dt))
    tables = plan.tables(n_hist)
    res = run_paths(ops, b, f, nu, xi0, grid, stream=stream, tables=tables,
                    threads=threads, keep_history=True, keep_increments=True)
    ref = res.trajectory
    coupled_states = ref.states + tables.gamma[None, :, :]
    coupled = Trajectory(times=ref.times, states=coupled_states,
                         t0_index=ref.t0_index, increments=ref.increments)
    ledger = GirsanovLedger(stoch_integral=res.stoch_integral,
                            quad_var=res.int_psi_sq,
                            identity_residual=res.identity_residual)
    return ref, coupled, ledger


@dataclass(frozen=True)
class BoundConstants:
    """Constants entering the explicit inequality bounds.

    ``c`` is the structural constant the theory asserts but does not fix; it
    is a configuration value here, usually set by the calibration routine.
    The Holder/Lipschitz constants ride along for reporting; the displayed
    bound absorbs them into ``c``.
    """

    c: float
    alpha: float
    modulus: DiniModulus
    k_holder: float | None = None
    lipschitz: float | None = None


def explicit_bound(kind: str, ops: OperatorSet, t_end: float, r: float,
                   shift, constants: BoundConstants,
                   nu: DelayMeasure | None = None) -> float:
    """Evaluate the four-term explicit bound for either coupling kind.

    kind "sigma": ``shift`` is the initial-segment displacement (SegmentPath,
    needs ``nu`` for its norm).  kind "beta": ``shift`` is the terminal
    displacement vector in the product space.
    """
    c = constants.c
    alpha = constants.alpha
    phi = constants.modulus
    bnorm = spectral_norm(ops.b)
    n1 = ops.space.n1

    if kind == "sigma":
        if not isinstance(shift, SegmentPath) or nu is None:
            raise ValueError("sigma bound needs a segment shift and the delay measure")
        h0 = shift.endpoint()
        h1_0 = float(np.linalg.norm(h0[:n1]))
        h2_0 = float(np.linalg.norm(h0[n1:]))
        habs = float(np.linalg.norm(h0))
        hnorm = segment_norm(shift, nu)
        win = t_end - r
        if win <= 0:
            raise HorizonError("sigma bound needs t_end > r")
        return (c * win * (h2_0 / win + bnorm * habs) ** 2
                + c * t_end * (h1_0 + bnorm * habs) ** (2 * alpha)
                + c * t_end * dini_phi(c * (h2_0 + bnorm * habs), phi) ** 2
                + c * t_end * (hnorm + bnorm * habs) ** 2)

    if kind == "beta":
        eta = np.asarray(shift, dtype=float)
        eta2 = float(np.linalg.norm(eta[n1:]))
        etaabs = float(np.linalg.norm(eta))
        t = t_end
        inner = t * eta2 + t ** 2 * bnorm * etaabs
        outer = t ** 2 * eta2 + t ** 3 * bnorm * etaabs
        return (c * t * bnorm ** (2 * alpha) * outer ** (2 * alpha)
                + c * t * dini_phi(c * inner, phi) ** 2
                + c * t * (inner ** 2 + (bnorm * outer) ** 2)
                + c * t * (eta2 + bnorm * etaabs) ** 2)

    raise ValueError(f"unknown bound kind {kind!r}")
