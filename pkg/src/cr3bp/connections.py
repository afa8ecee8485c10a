"""Continuation of periodic-orbit-to-torus connecting orbits.

The coupled system stacks the periodic orbit u, its Floquet eigenfunction v,
and the manifold orbit r into one 18-dimensional BVP on a shared mesh:

    u' = T f(u, sigma)         u(1) = u(0)              phase integral = 0
    v' = T f_u(u,0) v - lam v  v(1) = sign v(0)         <v(0), v(0)> = rho
    r' = T_r f(r, 0)           r(0) = u(0) + eps v(0)   r(1)_i = section value

That is 21 boundary and integral constraints against 18 ODE dimensions, so a
pseudo-arclength run needs four free scalars: (T, sigma, lam, eps).  rho, T_r
and the section stay fixed per run.  Varying T drags the energy along, which
continues the base orbit, the connecting orbit, and (indirectly) the torus it
winds around, all at once.  T_r is held at whatever the assembled orbit
brought; `extend_orbit` pushes it higher between runs when more windings are
wanted.

Classification of what the far end winds around is heuristic by construction:
the monitors (recurrence, rotation number, planarity, z-sign pattern) emit
advisory hints, never proofs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from . import dynamics as dyn
from .collocation import (BvpProblem, CollocationSystem, IntegralTerm,
                          MeshedSolution)
from .continuation import (BranchEvent, ContinuationFrame, Controls, Tangent,
                           compute_tangent, inner, run_continuation)
from .errors import InconsistentParts, InsufficientWindings, SectionNotReached
from .manifold import ManifoldOrbit, _manifold_problem

SCALARS = ("T", "sigma", "lam", "rho", "T_r", "eps")

MATCH_TOL = 1e-6          # assembly-time residual allowance on the identities
LAM_UNIT = 1.0            # below this, a dead run is blamed on the multiplier


def coupled_problem(mu, section, free=("T", "sigma", "lam", "eps"), sign=1):
    """The 18-dimensional orbit + eigenfunction + manifold-orbit BVP.

    free=('sigma','lam','eps') closes the isolated assembly polish
    (21 = 18 + 3); the four-scalar default is for arclength continuation.
    """

    data = {}

    def split(Y):
        return Y[..., :6], Y[..., 6:12], Y[..., 12:]

    def rhs(t, Y, s):
        u, v, r = split(Y)
        du = s["T"] * dyn.vector_field(u, s["sigma"], mu)
        Av = np.einsum("...ij,...j->...i", dyn.jacobian(u, mu, 0.0), v)
        dv = s["T"] * Av - s["lam"] * v
        dr = s["T_r"] * dyn.vector_field(r, 0.0, mu)
        return np.concatenate([du, dv, dr], axis=-1)

    def rhs_jac_y(t, Y, s):
        u, v, r = split(Y)
        K = Y.shape[0]
        J = np.zeros((K, 18, 18))
        J[:, :6, :6] = s["T"] * dyn.jacobian(u, mu, s["sigma"])
        J[:, 6:12, :6] = s["T"] * dyn.jacobian_action_gradient(u, v, mu)
        J[:, 6:12, 6:12] = s["T"] * dyn.jacobian(u, mu, 0.0)
        J[:, 6:12, 6:12] -= s["lam"] * np.eye(6)
        J[:, 12:, 12:] = s["T_r"] * dyn.jacobian(r, mu, 0.0)
        return J

    def rhs_jac_p(t, Y, s, free_names):
        u, v, r = split(Y)
        cols = []
        for name in free_names:
            col = np.zeros_like(Y)
            if name == "T":
                col[..., :6] = dyn.vector_field(u, s["sigma"], mu)
                col[..., 6:12] = np.einsum("...ij,...j->...i",
                                           dyn.jacobian(u, mu, 0.0), v)
            elif name == "sigma":
                col[..., 3:6] = s["T"] * u[..., 3:6]
            elif name == "lam":
                col[..., 6:12] = -v
            elif name == "T_r":
                col[..., 12:] = dyn.vector_field(r, 0.0, mu)
            cols.append(col)
        return np.stack(cols, axis=-1)

    def bc(y0, y1, s):
        u0, v0, r0 = y0[:6], y0[6:12], y0[12:]
        u1, v1, r1 = y1[:6], y1[6:12], y1[12:]
        return np.concatenate([
            u1 - u0,
            v1 - sign * v0,
            [v0 @ v0 - s["rho"]],
            r0 - u0 - s["eps"] * v0,
            [r1[section.index] - section.value]])

    def bc_jac(y0, y1, s, free_names):
        v0 = y0[6:12]
        J0 = np.zeros((20, 18))
        J1 = np.zeros((20, 18))
        J0[:6, :6] = -np.eye(6)
        J0[6:12, 6:12] = -sign * np.eye(6)
        J0[12, 6:12] = 2.0 * v0
        J0[13:19, :6] = -np.eye(6)
        J0[13:19, 6:12] = -s["eps"] * np.eye(6)
        J0[13:19, 12:] = np.eye(6)
        J1[:6, :6] = np.eye(6)
        J1[6:12, 6:12] = np.eye(6)
        J1[19, 12 + section.index] = 1.0
        Jp = np.zeros((20, len(free_names)))
        for i, name in enumerate(free_names):
            if name == "eps":
                Jp[13:19, i] = -v0
            elif name == "rho":
                Jp[12, i] = -1.0
        return J0, J1, Jp

    def phase_value(t, Y, s):
        return np.sum(Y[:, :6] * data["phase_ref"], axis=1)

    def phase_jac_y(t, Y, s):
        out = np.zeros((Y.shape[0], 18))
        out[:, :6] = data["phase_ref"]
        return out

    def phase_jac_p(t, Y, s, free_names):
        return np.zeros((Y.shape[0], len(free_names)))

    problem = BvpProblem(
        dim=18, rhs=rhs, rhs_jac_y=rhs_jac_y, rhs_jac_p=rhs_jac_p,
        bc=bc, bc_jac=bc_jac, n_bc=20,
        integrals=[IntegralTerm(phase_value, phase_jac_y, phase_jac_p)],
        free=tuple(free))
    problem.data = data

    def update_reference(sol):
        u = sol.values[:, :6]
        data["phase_ref"] = sol.scalars["T"] * dyn.vector_field(
            u, sol.scalars["sigma"], mu)

    problem.update_reference = update_reference
    return problem


@dataclass
class CoupledConnection:
    """Converged solution of the coupled system, with its fixed context."""

    solution: MeshedSolution      # 18-dim, scalars per SCALARS
    mu: float
    section: object               # manifold.Section the r-part ends on
    sign: int = 1

    @property
    def T(self):
        return self.solution.scalars["T"]

    @property
    def sigma(self):
        return self.solution.scalars["sigma"]

    @property
    def lam(self):
        return self.solution.scalars["lam"]

    @property
    def rho(self):
        return self.solution.scalars["rho"]

    @property
    def T_r(self):
        return self.solution.scalars["T_r"]

    @property
    def eps(self):
        return self.solution.scalars["eps"]

    @property
    def energy(self):
        return float(dyn.energy(self.solution.values[0, :6], self.mu))

    def u_part(self):
        return MeshedSolution(self.solution.mesh, self.solution.values[:, :6],
                              {"T": self.T, "sigma": self.sigma})

    def v_part(self):
        return MeshedSolution(self.solution.mesh,
                              self.solution.values[:, 6:12],
                              {"lam": self.lam, "rho": self.rho})

    def r_part(self):
        return MeshedSolution(self.solution.mesh,
                              self.solution.values[:, 12:],
                              {"T_r": self.T_r, "eps": self.eps})

    def start_defect(self):
        y0 = self.solution.values[0]
        gap = y0[12:] - y0[:6] - self.eps * y0[6:12]
        return float(np.max(np.abs(gap)))


def assemble_coupled(base, packet, morbit, tol=1e-10):
    """Merge a periodic orbit, its eigenpacket, and a manifold orbit.

    The three parts must describe the same configuration: the packet's orbit
    block has to sit on `base`, and the manifold orbit's start has to satisfy
    r(0) = u(0) + eps v(0) against the packet's boundary values.  Residuals
    beyond MATCH_TOL raise InconsistentParts.  The merged guess lives on the
    r-part's mesh (the finest of the three); the orbit and eigenfunction are
    interpolated onto it and one isolated solve at fixed T, rho, T_r absorbs
    the interpolation error.
    """
    mu = packet.mu
    base_sol = getattr(base, "solution", base)
    u0 = packet.extended.values[0, :6]
    v0 = packet.extended.values[0, 6:]
    gap_base = float(np.max(np.abs(base_sol.values[0] - u0)))
    gap_start = float(np.max(np.abs(morbit.r.values[0] - u0
                                    - morbit.eps * v0)))
    if max(gap_base, gap_start) > MATCH_TOL:
        raise InconsistentParts(
            f"part mismatch before assembly: base vs packet {gap_base:.2e}, "
            f"manifold start identity {gap_start:.2e}")
    mesh = morbit.r.mesh
    uv = packet.extended.evaluate(mesh.node_times)
    values = np.hstack([uv, morbit.r.values])
    scalars = {"T": packet.T, "sigma": packet.extended.scalars["sigma"],
               "lam": packet.lam, "rho": packet.rho,
               "T_r": morbit.T_r, "eps": morbit.eps}
    guess = MeshedSolution(mesh, values, scalars)
    problem = coupled_problem(mu, morbit.section,
                              free=("sigma", "lam", "eps"), sign=packet.sign)
    problem.update_reference(guess)
    res = CollocationSystem(problem, mesh).solve(guess, tol=tol)
    return CoupledConnection(res.solution, mu, morbit.section, packet.sign)


@dataclass
class ConnectionFamily:
    connections: list
    records: list
    events: list
    reason: str
    frame: ContinuationFrame
    closed: bool = False
    closure_metric: float = None


def continue_connection(conn, *, controls=None, orient=1, stop_at=None,
                        detect_closure=True, closure_tol=1e-6,
                        closure_gate=0.1, lam_unit=LAM_UNIT,
                        on_accept=None):
    """March the coupled family in the direction of growing (orient=+1) or
    shrinking period.

    Stops on: a closed loop (the path lands back on the start point within
    closure_tol, detected through a gated arclength monitor), the multiplier
    reaching the unit circle (step underflow with lam below lam_unit, where
    the unstable manifold ceases to exist), step underflow elsewhere (the
    special-connection obstacle), an explicit stop_at target, or max_steps.

    Records carry the scalars plus the energy monitor "E"; energy folds show
    up as Fold events on that monitor.
    """
    mu = conn.mu
    problem = coupled_problem(mu, conn.section, sign=conn.sign)
    sol = conn.solution.copy()
    problem.update_reference(sol)
    system = CollocationSystem(problem, sol.mesh)
    guess = Tangent(np.zeros_like(sol.values), {"T": float(orient),
                                                "sigma": 0.0, "lam": 0.0,
                                                "eps": 0.0})
    tan, _ = compute_tangent(system, sol, guess)

    c = controls or Controls(max_steps=300, ds_max=0.1)
    c.adapt_every = c.adapt_every or 5
    if c.error_cap is None:
        c.error_cap = 1e-5
    c.monitors.setdefault(
        "E", lambda s: float(dyn.energy(s.values[0, :6], mu)))
    if on_accept is not None:
        c.on_accept = on_accept

    start = _ClosureTarget(sol, tan, problem.free, closure_gate)
    if stop_at is not None:
        c.stop_at = stop_at
    elif detect_closure:
        c.monitors["_loopgap"] = start.gap
        c.stop_at = ("_loopgap", 0.0, 1e-12)
        c.stop_at_skip = 1

    result = run_continuation(problem, ContinuationFrame(sol, tan, 0.02), c)

    reason = result.reason
    closed = False
    metric = None
    if result.solutions:
        last = result.solutions[-1]
        if reason == "target" and stop_at is None and detect_closure:
            metric = start.metric(last)
            closed = metric < closure_tol
            result.events.append(BranchEvent("LoopClosure", last,
                                             {"metric": metric,
                                              "closed": closed}))
            if closed:
                reason = "closed_loop"
        elif reason == "step_underflow" and last.scalars["lam"] < lam_unit:
            reason = "multiplier_on_unit_circle"

    connections = [CoupledConnection(s, mu, conn.section, conn.sign)
                   for s in result.solutions]
    return ConnectionFamily(connections, result.records, result.events,
                            reason, result.frame, closed, metric)


class _ClosureTarget:
    """Arclength progress past the run's start point, gated by proximity.

    Far from the start the monitor clamps to 1.0 so it carries no sign
    changes; inside the gate it is the Keller inner product of the offset
    with the start tangent, which crosses zero exactly when the path returns
    through the starting point.
    """

    def __init__(self, sol, tangent, free, gate):
        self.mesh = sol.mesh
        self.nodes = sol.mesh.node_times
        self.values = sol.values.copy()
        self.scalars = dict(sol.scalars)
        self.tangent = tangent.copy()
        self.free = free
        self.gate = gate
        self.probe_t = np.linspace(0.0, 1.0, 17)
        self.probe = sol.evaluate(self.probe_t)

    def gap(self, sol):
        s0 = self.scalars
        if abs(sol.scalars["T"] - s0["T"]) > self.gate:
            return 1.0
        if abs(sol.scalars["lam"] - s0["lam"]) > self.gate:
            return 1.0
        if abs(np.log(abs(sol.scalars["eps"]))
               - np.log(abs(s0["eps"]))) > self.gate:
            return 1.0
        if np.max(np.abs(sol.evaluate(self.probe_t) - self.probe)) \
                > 2.0 * self.gate:
            return 1.0
        dv = sol.evaluate(self.nodes) - self.values
        dp = {k: sol.scalars[k] - s0[k] for k in self.free}
        return inner(self.mesh, dv, dp,
                     self.tangent.values, self.tangent.scalars)

    def metric(self, sol):
        dv = np.max(np.abs(sol.evaluate(self.nodes) - self.values))
        dp = max(abs(sol.scalars[k] - self.scalars[k]) for k in self.free)
        return float(max(dv, dp))


def refine_connection_to_energy(conn, e_target, tol=1e-10, max_steps=120):
    """Land a coupled solution exactly on a requested energy.

    Tries both continuation directions; the wrong one is abandoned as soon
    as the energy moves away from the target.
    """
    d0 = abs(conn.energy - e_target)

    for orient in (1, -1):
        def wrong_way(s, rec):
            if rec["step"] >= 5 and abs(rec["E"] - e_target) > 1.5 * d0 + 1e-4:
                return "wrong_way"
            return None

        c = Controls(max_steps=max_steps, ds_max=0.1, stop=[wrong_way])
        fam = continue_connection(conn, controls=c, orient=orient,
                                  detect_closure=False,
                                  stop_at=("E", e_target, tol))
        if fam.reason == "target":
            return fam.connections[-1]
    raise SectionNotReached(
        f"no landing on E={e_target} from E={conn.energy}", conn.energy)


def extend_orbit(morbit, mu, t_r_target, *, controls=None):
    """Push a manifold orbit to a longer integration time at the same section.

    Continuation in (eps, T_r) with the endpoint held on the section, landing
    exactly on the requested T_r.  Near an obstacle this is the lever that
    adds windings before coupling: eps drifts toward the critical offset
    while the far end picks up turns around the torus.
    """
    toward = float(np.sign(t_r_target - morbit.T_r)) or 1.0
    problem = _manifold_problem(mu, morbit.base_u0, morbit.base_v0,
                                section=morbit.section, free=("eps", "T_r"))
    sol = morbit.r.copy()
    system = CollocationSystem(problem, sol.mesh)
    guess = Tangent(np.zeros_like(sol.values), {"eps": 0.0, "T_r": toward})
    tan, _ = compute_tangent(system, sol, guess)
    if np.sign(tan.scalars["T_r"]) != toward:
        tan.values = -tan.values
        tan.scalars = {k: -v for k, v in tan.scalars.items()}

    c = controls or Controls(max_steps=400, ds_max=0.5)
    c.adapt_every = c.adapt_every or 10
    if c.error_cap is None:
        c.error_cap = 1e-5
    c.stop_at = ("T_r", float(t_r_target), 1e-10)
    result = run_continuation(problem, ContinuationFrame(sol, tan, 0.02), c)
    if result.reason != "target":
        reached = result.solutions[-1].scalars["T_r"] if result.solutions \
            else morbit.T_r
        raise SectionNotReached(
            f"extension stalled at T_r={reached:.3f}: {result.reason}",
            reached)
    return ManifoldOrbit(result.solutions[-1], morbit.section,
                         morbit.base_u0, morbit.base_v0,
                         morbit.base_orbit, morbit.packet)


# -- classification monitors -------------------------------------------------

@dataclass
class ClassifyConfig:
    """Thresholds for the winding monitors.  All advisory."""

    n_samples: int = 6000
    loop_bounds: tuple = (1.8, 5.0)   # admissible winding return times
    rec_tol: float = 0.08             # spatial recurrence cutoff
    min_windings: float = 3.0
    planar_tol: float = 1e-2          # max |z| calling a winding planar
    rot_tol: float = 0.01             # rotation-number distance to p/q
    max_denominator: int = 8
    torus_floor: float = 2e-3         # rms cross-section below which the
                                      # torus is treated as collapsed
    alternation_min: float = 0.8


@dataclass
class ConnectionRecord:
    energy: float
    lam: float
    eps: float
    T: float
    T_r: float
    hints: list = field(default_factory=list)
    monitors: dict = field(default_factory=dict)


def winding_stats(r_sol, config=None):
    """Locate the trailing winding segment of a manifold orbit by recurrence.

    For each sample the nearest spatial return within the admissible
    return-time window is found; the last contiguous stretch where that
    recurrence distance stays under config.rec_tol is taken as the winding
    segment.  Raises InsufficientWindings when no stretch of at least
    config.min_windings loops exists.

    Returns a dict with the segment bounds (physical time), the winding
    count, the mean return time, per-loop z statistics, and the loop-start
    states used by the rotation-number estimate.
    """
    cfg = config or ClassifyConfig()
    T_r = r_sol.scalars["T_r"]
    n = cfg.n_samples
    ts = np.linspace(0.0, 1.0, n)
    X = r_sol.evaluate(ts)
    P = X[:, :3]
    dt = T_r / (n - 1)
    k_lo = max(int(np.floor(cfg.loop_bounds[0] / dt)), 1)
    k_hi = int(np.ceil(cfg.loop_bounds[1] / dt))
    m = n - k_hi
    if k_hi <= k_lo or m < 2:
        raise InsufficientWindings(
            f"orbit spans {T_r:.2f} time units, shorter than the "
            f"return-time window {cfg.loop_bounds}")

    rec = np.full(m, np.inf)
    kbest = np.zeros(m, dtype=int)
    for k in range(k_lo, k_hi + 1):
        d = np.linalg.norm(P[k:k + m] - P[:m], axis=1)
        better = d < rec
        rec[better] = d[better]
        kbest[better] = k

    mask = rec < cfg.rec_tol
    runs = _true_runs(mask)
    if not runs:
        raise InsufficientWindings("no recurrent segment under the cutoff")
    i_a, i_b = runs[-1]
    tau_coarse = kbest[i_a:i_b + 1] * dt
    tau_mean = float(np.mean(tau_coarse))
    t_a = ts[i_a] * T_r
    # the last masked sample still has one full return ahead of it
    t_b = ts[i_b] * T_r + kbest[i_b] * dt
    windings = (t_b - t_a) / tau_mean
    if windings < cfg.min_windings:
        raise InsufficientWindings(
            f"{windings:.2f} windings in the recurrent segment, "
            f"need {cfg.min_windings}")

    loops = _split_loops(r_sol, T_r, t_a, t_b, tau_mean, cfg)
    return {"t_start": t_a, "t_end": t_b, "windings": float(windings),
            "tau_mean": float(np.mean([lp["tau"] for lp in loops])),
            "loops": loops,
            "states": np.array([lp["state"] for lp in loops]),
            "rec": rec, "rec_times": ts[:m] * T_r}


def _true_runs(mask):
    """[(start, stop)] index pairs of the contiguous True runs."""
    runs = []
    start = None
    for i, flag in enumerate(mask):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(mask) - 1))
    return runs


def _split_loops(r_sol, T_r, t_a, t_b, tau_guess, cfg):
    """Walk loop by loop through [t_a, t_b], refining each return time."""

    def pos(t):
        return r_sol.evaluate(np.atleast_1d(t) / T_r)[0, :3]

    loops = []
    t = t_a
    while t + 0.5 * tau_guess < t_b and len(loops) < 400:
        p0 = pos(t)
        res = minimize_scalar(
            lambda tau: float(np.linalg.norm(pos(t + tau) - p0)),
            bounds=(max(0.6 * tau_guess, cfg.loop_bounds[0]),
                    min(1.4 * tau_guess, cfg.loop_bounds[1])),
            method="bounded", options={"xatol": 1e-10})
        tau = float(res.x)
        stop = min(t + tau, t_b)
        seg = r_sol.evaluate(np.linspace(t / T_r, stop / T_r, 120))
        loops.append({"t": t, "tau": tau,
                      "state": r_sol.evaluate(np.array([t / T_r]))[0],
                      "z_max": float(np.max(np.abs(seg[:, 2]))),
                      "z_mean": float(np.mean(seg[:, 2]))})
        t += tau
    return loops


def classify_connection(conn, config=None):
    """Advisory classification of what the connecting orbit winds around.

    Returns a ConnectionRecord whose hints are drawn from: quasi-torus,
    resonant q:p, planar-orbit, near-homoclinic, symmetric-counterpart.
    Insufficient windings produce a record with empty hints rather than an
    error, since short runs are a normal stage of the pipeline.
    """
    cfg = config or ClassifyConfig()
    record = ConnectionRecord(conn.energy, conn.lam, conn.eps, conn.T,
                              conn.T_r)
    try:
        stats = winding_stats(conn.r_part(), cfg)
    except InsufficientWindings as exc:
        record.monitors["windings"] = str(exc)
        return record

    loops = stats["loops"]
    record.monitors["windings"] = stats["windings"]
    record.monitors["quasi_period"] = stats["tau_mean"]
    record.monitors["z_max_per_loop"] = [lp["z_max"] for lp in loops]
    record.monitors["z_mean_per_loop"] = [lp["z_mean"] for lp in loops]

    S = stats["states"]
    delta = S - S.mean(axis=0)
    svals = np.linalg.svd(delta, compute_uv=False)
    torus_rms = float(svals[0] / np.sqrt(len(S)))
    record.monitors["torus_rms"] = torus_rms

    z_mean = np.array([lp["z_mean"] for lp in loops])
    z_base = _base_z(conn)
    record.monitors["z_base"] = z_base
    signs = np.sign(z_mean[np.abs(z_mean) > cfg.planar_tol])
    alternation = (float(np.mean(signs[1:] != signs[:-1]))
                   if signs.size > 1 else 0.0)
    record.monitors["alternation"] = alternation

    if loops[-1]["z_max"] < cfg.planar_tol:
        record.hints.append("planar-orbit")
    if signs.size > 1 and alternation >= cfg.alternation_min:
        record.hints.append("symmetric-counterpart")
    elif (signs.size > 0 and alternation < 0.2 and abs(z_base) > cfg.planar_tol
          and np.all(signs == -np.sign(z_base))):
        record.hints.append("symmetric-counterpart")

    if torus_rms < cfg.torus_floor:
        if signs.size > 0 and abs(z_base) > cfg.planar_tol \
                and np.all(signs == np.sign(z_base)):
            record.hints.append("near-homoclinic")
    else:
        record.hints.append("quasi-torus")
        rho_rot = _rotation_number(delta)
        if rho_rot is not None:
            record.monitors["rotation_number"] = rho_rot
            frac = Fraction(rho_rot).limit_denominator(cfg.max_denominator)
            if frac.numerator > 0 and \
                    abs(float(frac) - rho_rot) < cfg.rot_tol:
                record.hints.append(
                    f"resonant {frac.denominator}:{frac.numerator}")
    return record


def _base_z(conn):
    """Mesh-weighted mean z of the base orbit's winding reference."""
    w = conn.solution.mesh.node_weights
    z = conn.solution.values[:, 2]
    return float(np.sum(w * z) / np.sum(w))


def _rotation_number(delta):
    """Mean angular advance per loop of the cross-section trace, in [0, 1/2].

    The loop-start offsets trace an invariant circle on the torus
    cross-section; the angle between consecutive offsets in the top two
    principal directions estimates the rotation number up to the usual
    direction and 1-complement ambiguity, which the folding removes.
    """
    if len(delta) < 4:
        return None
    _, svals, Vt = np.linalg.svd(delta, full_matrices=False)
    if svals[1] < 1e-3 * svals[0]:
        return None                   # trace too thin for a defined angle
    xy = delta @ Vt[:2].T
    theta = np.unwrap(np.arctan2(xy[:, 1], xy[:, 0]))
    frac = np.mean(np.diff(theta)) / (2.0 * np.pi) % 1.0
    return float(min(frac, 1.0 - frac))


# -- section traces ----------------------------------------------------------

@dataclass
class SectionTrace:
    points: np.ndarray            # (k, 4) rows of (x, y, xdot, ydot)
    times: np.ndarray
    directions: np.ndarray        # +1 crossing upward in the coordinate
    degenerate: bool = False


def section_trace(sol, index=2, value=0.0, n_scan=4000):
    """Ordered plane crossings of a trajectory, for Poincare-style plots.

    `sol` is a 6-dim trajectory solution or a CoupledConnection (whose r-part
    is traced).  Crossing times are polished on the collocation interpolant
    to machine precision, so the reported |coordinate - value| is at the
    1e-10 level or below.  A trajectory lying inside the plane everywhere is
    flagged degenerate and returned as plain samples.
    """
    if isinstance(sol, CoupledConnection):
        sol = sol.r_part()
    t_scale = sol.scalars.get("T_r", sol.scalars.get("T", 1.0))
    ts = np.linspace(0.0, 1.0, n_scan)
    vals = sol.evaluate(ts)
    g = vals[:, index] - value
    if np.max(np.abs(g)) < 1e-10:
        return SectionTrace(vals[:, [0, 1, 3, 4]], ts * t_scale,
                            np.zeros(len(ts)), degenerate=True)

    def offset(t):
        return float(sol.evaluate(np.array([t]))[0, index] - value)

    points, times, directions = [], [], []
    for i in np.flatnonzero(g[:-1] * g[1:] < 0.0):
        tc = brentq(offset, ts[i], ts[i + 1], xtol=1e-15, rtol=8.9e-16)
        state = sol.evaluate(np.array([tc]))[0]
        points.append(state[[0, 1, 3, 4]])
        times.append(tc * t_scale)
        directions.append(1.0 if g[i + 1] > g[i] else -1.0)
    return SectionTrace(np.array(points).reshape(-1, 4), np.array(times),
                        np.array(directions))
