"""Orbits in the two-dimensional unstable manifold of a periodic orbit.

A manifold orbit solves r' = T_r f(r, 0) with r(0) pinned to the linear
predictor u(0) + eps * v(0) built from the orbit and its unit Floquet
eigenfunction.  Growing means continuing in the integration time T_r from
the constant solution at T_r = 0 until the endpoint r(1) reaches a section;
sweeping then frees eps alongside T_r with the endpoint held on the section,
so pseudo-arclength continuation walks the manifold across the fundamental
domain eps in [eps1, e^lambda * eps1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from . import dynamics as dyn
from .collocation import (BvpProblem, CollocationSystem, Mesh, MeshedSolution)
from .continuation import (ContinuationFrame, Controls, Tangent,
                           compute_tangent, run_continuation)
from .errors import NoConvergence, NonPositiveExponent, SectionNotReached

#: hard ceiling on the integration time during growth and obstacle detection
T_R_CAP = 50.0
#: eps motion per step below which a long integration counts as an obstacle
EPS_STALL = 1e-10


@dataclass(frozen=True)
class Section:
    """Coordinate section, e.g. x = x_value with termination at crossing k."""

    index: int = 0
    value: float = 0.0
    crossing: int = 1

    def __post_init__(self):
        if not 0 <= self.index <= 5:
            raise ValueError("section coordinate index must be in 0..5")
        if self.crossing < 1:
            raise ValueError("crossing count must be at least 1")

    def offset(self, state):
        return float(state[..., self.index] - self.value)


@dataclass(frozen=True)
class FundamentalDomain:
    eps1: float
    eps2: float


def fundamental_domain(eps1, lam):
    """[eps1, e^lambda * eps1]; one sweep of it covers the manifold locally."""
    if lam <= 0.0:
        raise NonPositiveExponent(f"exponent {lam} is not positive")
    if eps1 == 0.0:
        raise ValueError("eps1 must be nonzero")
    return FundamentalDomain(eps1, float(np.exp(lam)) * eps1)


@dataclass
class ManifoldOrbit:
    r: MeshedSolution            # scalars: T_r, eps
    section: Section
    base_u0: np.ndarray          # orbit start point, frozen during sweeps
    base_v0: np.ndarray          # unit eigenfunction start point
    base_orbit: MeshedSolution = None
    packet: object = None

    @property
    def eps(self):
        return self.r.scalars["eps"]

    @property
    def T_r(self):
        return self.r.scalars["T_r"]

    def start_defect(self):
        want = self.base_u0 + self.eps * self.base_v0
        return float(np.max(np.abs(self.r.values[0] - want)))


def _manifold_problem(mu, u0, v0, section=None, free=("T_r",)):
    """BVP for r' = T_r f(r, 0) with r(0) = u0 + eps*v0.

    Without a section the problem suits growth in T_r (eps enters as a fixed
    scalar); with one, the endpoint row pins r(1) on it and eps joins the
    free scalars for the sweep.
    """

    def rhs(t, Y, s):
        return s["T_r"] * dyn.vector_field(Y, 0.0, mu)

    def rhs_jac_y(t, Y, s):
        return s["T_r"] * dyn.jacobian(Y, mu, 0.0)

    def rhs_jac_p(t, Y, s, free_names):
        cols = []
        for name in free_names:
            if name == "T_r":
                cols.append(dyn.vector_field(Y, 0.0, mu))
            else:
                cols.append(np.zeros_like(Y))
        return np.stack(cols, axis=-1)

    n_bc = 6 if section is None else 7

    def bc(y0, y1, s):
        rows = list(y0 - u0 - s["eps"] * v0)
        if section is not None:
            rows.append(y1[section.index] - section.value)
        return np.array(rows)

    def bc_jac(y0, y1, s, free_names):
        J0 = np.zeros((n_bc, 6))
        J1 = np.zeros((n_bc, 6))
        J0[:6, :6] = np.eye(6)
        if section is not None:
            J1[6, section.index] = 1.0
        Jp = np.zeros((n_bc, len(free_names)))
        for i, name in enumerate(free_names):
            if name == "eps":
                Jp[:6, i] = -v0
        return J0, J1, Jp

    return BvpProblem(dim=6, rhs=rhs, rhs_jac_y=rhs_jac_y, rhs_jac_p=rhs_jac_p,
                      bc=bc, bc_jac=bc_jac, n_bc=n_bc, integrals=[],
                      free=tuple(free))


def grow_orbit(orbit_sol, packet, eps, section, mu, *, n_intervals=200,
               degree=4, t_r_cap=T_R_CAP, controls=None):
    """Continue in T_r from the constant solution until the section's
    k-th crossing; returns the converged ManifoldOrbit ending on it."""
    if eps == 0.0:
        raise ValueError("eps must be nonzero; the zero offset never leaves "
                         "the periodic orbit")
    u0 = orbit_sol.values[0].copy()
    v0 = packet.extended.values[0, 6:].copy()
    r0 = u0 + eps * v0
    problem = _manifold_problem(mu, u0, v0)
    mesh = Mesh.uniform(n_intervals, degree)
    base = MeshedSolution(mesh, np.tile(r0, (mesh.n_nodes, 1)),
                          {"T_r": 0.0, "eps": float(eps)})
    system = CollocationSystem(problem, mesh)
    guess = Tangent(np.zeros_like(base.values), {"T_r": 1.0})
    tan, _ = compute_tangent(system, base, guess)
    if tan.scalars["T_r"] < 0.0:
        tan.values = -tan.values
        tan.scalars = {k: -v for k, v in tan.scalars.items()}

    c = controls or Controls(max_steps=400, ds_max=0.5)
    c.adapt_every = c.adapt_every or 10
    c.monitors.setdefault("sec", lambda s: section.offset(s.values[-1]))
    c.stop_at = ("sec", 0.0, 1e-11)
    c.stop_at_skip = section.crossing - 1
    cap = t_r_cap

    def too_long(s, rec):
        return "t_r_cap" if s.scalars["T_r"] > cap else None

    c.stop = list(c.stop) + [too_long]
    result = run_continuation(problem, ContinuationFrame(base, tan, 0.05), c)
    if result.reason != "target":
        reached = result.solutions[-1].scalars["T_r"] if result.solutions else 0.0
        raise SectionNotReached(reached, result.reason)
    r = result.solutions[-1]
    return ManifoldOrbit(r, section, u0, v0, orbit_sol, packet)


def extend_by_loop(morbit, mu, window, tol=1e-10, max_iter=12):
    """Insert one recurrence loop of the orbit and re-solve with eps free.

    window = (t_a, t_b) in scaled time marks one near-closed loop,
    r(t_a) ~ r(t_b).  The initial guess replays [t_a, t_b] once more before
    the tail, and the Newton solve (T_r pinned at its spliced value, eps
    free, endpoint held on the section) closes the seam.  Near a connection
    the manifold BVP branch is a ladder: each added winding lives on the
    next rung, at an eps exponentially closer to the critical offset; this
    jumps rungs directly instead of walking pseudo-arclength around the
    hairpin folds that join them.
    """
    t_a, t_b = float(window[0]), float(window[1])
    if not 0.0 < t_a < t_b < 1.0:
        raise ValueError("loop window must satisfy 0 < t_a < t_b < 1")
    r = morbit.r
    pts = r.mesh.points
    guard = 0.25 * np.median(np.diff(pts))
    p1 = pts[pts < t_b - guard]
    p2 = pts[pts > t_a + guard]
    new_pts = np.concatenate([p1, [t_b], t_b + (p2 - t_a)])
    L = new_pts[-1]
    mesh = Mesh(new_pts / L, r.mesh.degree)
    told = mesh.node_times * L
    told = np.where(told <= t_b, told, told - (t_b - t_a))
    sol = MeshedSolution(mesh, r.evaluate(np.clip(told, 0.0, 1.0)),
                         {"T_r": morbit.T_r * L, "eps": morbit.eps})
    problem = _manifold_problem(mu, morbit.base_u0, morbit.base_v0,
                                section=morbit.section, free=("eps",))
    res = CollocationSystem(problem, mesh).solve(sol, tol=tol,
                                                 max_iter=max_iter)
    return ManifoldOrbit(res.solution, morbit.section, morbit.base_u0,
                         morbit.base_v0, morbit.base_orbit, morbit.packet)


def add_winding(morbit, mu, *, t_window=None, loop_bounds=(2.8, 4.8),
                tries=12, n_scan=4000, tol=1e-9, max_iter=25):
    """Splice one extra winding into a near-connection manifold orbit.

    Scans the orbit for the closest full-state returns r(t+tau) ~ r(t) with
    tau inside loop_bounds (physical time), then feeds the best seams to
    extend_by_loop until one converges.  The Newton basin near the critical
    offset is speckled, so several near-identical seams are tried in
    mismatch order rather than only the single best one.  t_window (physical
    time) restricts the seam search, e.g. to the torus-winding segment.
    """
    r = morbit.r
    T_r = morbit.T_r
    ts = np.linspace(0.0, 1.0, n_scan)
    X = r.evaluate(ts)
    dt = T_r / (n_scan - 1)
    k_lo = max(int(np.floor(loop_bounds[0] / dt)), 1)
    k_hi = int(np.ceil(loop_bounds[1] / dt))
    m = n_scan - k_hi
    if k_hi <= k_lo or m < 2:
        raise ValueError("orbit too short for the requested loop bounds")
    rec = np.full(m, np.inf)
    kbest = np.zeros(m, dtype=int)
    for k in range(k_lo, k_hi + 1):
        d = np.linalg.norm(X[k:k + m] - X[:m], axis=1)
        hit = d < rec
        rec[hit] = d[hit]
        kbest[hit] = k
    tseg = ts[:m] * T_r
    lo, hi = t_window if t_window is not None else (0.02 * T_r, 0.98 * T_r)
    penalty = np.where((tseg > lo) & (tseg < hi), 0.0, np.inf)
    order = np.argsort(rec + penalty)[:tries]
    last = None
    for i in order:
        if not np.isfinite(rec[i]):
            break
        w = (tseg[i] / T_r, (tseg[i] + kbest[i] * dt) / T_r)
        if not 0.0 < w[0] < w[1] < 1.0:
            continue
        try:
            return extend_by_loop(morbit, mu, w, tol=tol, max_iter=max_iter)
        except NoConvergence as exc:
            last = exc
    raise NoConvergence("no seam closed into an extra winding"
                        + (f" (last: {last})" if last else ""))


@dataclass
class SweepResult:
    orbits: list
    records: list
    events: list
    termination: str             # domain_complete | obstacle | other reasons
    frame: ContinuationFrame


def sweep_manifold(morbit, domain, mu, *, controls=None, t_r_cap=T_R_CAP,
                   store_every=1):
    """Walk the manifold from eps1 toward eps2 with r(1) held on the section.

    Terminal states: 'domain_complete' when eps lands on eps2; 'obstacle' on step
    underflow or when T_r exceeds the cap while eps stalls; other stop
    reasons pass through.
    """
    section = morbit.section
    problem = _manifold_problem(mu, morbit.base_u0, morbit.base_v0,
                                section=section, free=("eps", "T_r"))
    sol = morbit.r.copy()
    system = CollocationSystem(problem, sol.mesh)
    toward = np.sign(domain.eps2 - domain.eps1) or 1.0
    guess = Tangent(np.zeros_like(sol.values), {"eps": toward, "T_r": 0.0})
    tan, _ = compute_tangent(system, sol, guess)
    if np.sign(tan.scalars["eps"]) != toward:
        tan.values = -tan.values
        tan.scalars = {k: -v for k, v in tan.scalars.items()}

    c = controls or Controls(max_steps=600, ds_max=0.2)
    c.adapt_every = c.adapt_every or 10
    if c.error_cap is None:
        c.error_cap = 1e-5
    c.store_every = store_every
    c.stop_at = ("eps", domain.eps2, 1e-13)
    state = {"eps": morbit.eps}

    def stalled(s, rec):
        moved = abs(s.scalars["eps"] - state["eps"])
        state["eps"] = s.scalars["eps"]
        if s.scalars["T_r"] > t_r_cap and moved < EPS_STALL:
            return "obstacle"
        return None

    c.stop = list(c.stop) + [stalled]

    def endpoint_record(s, rec):
        rec["end"] = s.values[-1].copy()

    c.on_accept = endpoint_record
    result = run_continuation(problem, ContinuationFrame(sol, tan, 1e-3 * abs(morbit.eps) + 1e-6), c)
    termination = {"target": "domain_complete",
                   "step_underflow": "obstacle"}.get(result.reason,
                                                     result.reason)
    orbits = [ManifoldOrbit(s, section, morbit.base_u0, morbit.base_v0,
                            morbit.base_orbit, morbit.packet)
              for s in result.solutions]
    return SweepResult(orbits, result.records, result.events, termination,
                       result.frame)


def shooting_compare(morbit, mu, n_samples=400, rtol=1e-12, atol=1e-12):
    """Initial-value integration from the same r(0), for defect reporting.

    Returns a dict with scaled times, both trajectories, and the pointwise
    distance; the IVP uses an adaptive high-order Runge-Kutta method.
    """
    r0 = morbit.r.values[0]
    T_r = morbit.T_r

    def f(t, y):
        return dyn.vector_field(y, 0.0, mu)

    ts = np.linspace(0.0, 1.0, n_samples)
    ivp = solve_ivp(f, (0.0, T_r), r0, t_eval=ts * T_r, method="DOP853",
                    rtol=rtol, atol=atol)
    if not ivp.success:
        raise RuntimeError(f"initial-value integration failed: {ivp.message}")
    bvp = morbit.r.evaluate(ts)
    defect = np.linalg.norm(ivp.y.T - bvp, axis=1)
    return {"t": ts * T_r, "ivp": ivp.y.T, "bvp": bvp, "defect": defect}
