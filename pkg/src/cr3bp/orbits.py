"""Periodic-orbit boundary value problems and family continuation.

The scaled-time formulation solves u' = T f(u, sigma) on [0,1] with periodic
boundary conditions, an integral phase condition anchored to the previous
family member, and free scalars (T, sigma).  sigma is the unfolding parameter
that makes the conservative problem well posed; it vanishes (to tolerance) at
every converged orbit.  Families start from the oscillatory pairs of a
libration point and are marched by pseudo-arclength continuation; Floquet
multipliers come from the monodromy condensation of the converged mesh.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .collocation import (BvpProblem, CollocationSystem, IntegralTerm, Mesh,
                          MeshedSolution, floquet_multipliers)
from .continuation import (BranchEvent, ContinuationFrame, Controls, Tangent,
                           branch_switch, compute_tangent, normalize_tangent,
                           run_continuation)
from .errors import BranchSwitchFailure, NoConvergence

#: default stop bounds for orbit families
ENERGY_WINDOW = (-2.0, -1.4)
PERIOD_CAP = 10.0


def _unfolding(Y):
    d = np.zeros_like(Y)
    d[..., 3:] = Y[..., 3:]
    return d


def periodic_problem(mu, free=("T", "sigma"), pin_energy=None):
    """BVP for a periodic orbit in scaled time.

    free selects the scalar unknowns; pass pin_energy to append the boundary
    row E(u(0)) = pin_energy (used when landing exactly on a family member).
    The phase reference lives in problem.data['phase_ref'] and is re-anchored
    by update_reference after every accepted continuation step.
    """

    data = {}

    def rhs(t, Y, s):
        return s["T"] * dyn.vector_field(Y, s["sigma"], mu)

    def rhs_jac_y(t, Y, s):
        return s["T"] * dyn.jacobian(Y, mu, s["sigma"])

    def rhs_jac_p(t, Y, s, free_names):
        cols = []
        for name in free_names:
            if name == "T":
                cols.append(dyn.vector_field(Y, s["sigma"], mu))
            elif name == "sigma":
                cols.append(s["T"] * _unfolding(Y))
            else:
                cols.append(np.zeros_like(Y))
        return np.stack(cols, axis=-1)

    n_bc = 6 if pin_energy is None else 7

    def bc(y0, y1, s):
        rows = list(y1 - y0)
        if pin_energy is not None:
            rows.append(dyn.energy(y0, mu) - pin_energy)
        return np.array(rows)

    def bc_jac(y0, y1, s, free_names):
        J0 = np.zeros((n_bc, 6))
        J1 = np.zeros((n_bc, 6))
        J0[:6, :6] = -np.eye(6)
        J1[:6, :6] = np.eye(6)
        if pin_energy is not None:
            J0[6] = dyn.energy_gradient(y0, mu)
        return J0, J1, np.zeros((n_bc, len(free_names)))

    def phase_value(t, Y, s):
        return np.sum(Y * data["phase_ref"], axis=1)

    def phase_jac_y(t, Y, s):
        return data["phase_ref"]

    def phase_jac_p(t, Y, s, free_names):
        return np.zeros((Y.shape[0], len(free_names)))

    problem = BvpProblem(
        dim=6, rhs=rhs, rhs_jac_y=rhs_jac_y, rhs_jac_p=rhs_jac_p,
        bc=bc, bc_jac=bc_jac, n_bc=n_bc,
        integrals=[IntegralTerm(phase_value, phase_jac_y, phase_jac_p)],
        free=tuple(free))
    problem.data = data

    def update_reference(sol):
        data["phase_ref"] = rhs(sol.mesh.node_times, sol.values, sol.scalars)

    problem.update_reference = update_reference
    return problem


def equilibrium_frame(problem, point, pair, mu, mesh=None, ds0=1e-2,
                      n_intervals=100, degree=4):
    """Continuation frame seeded at a libration point's oscillatory pair.

    The previous solution is the (exact) constant solution at the point with
    T = 2*pi/omega; the tangent is the normalized harmonic eigendirection.
    The phase condition is anchored to the harmonic predictor's derivative.
    """
    if mesh is None:
        mesh = Mesh.uniform(n_intervals, degree)
    omega, vec = dyn.oscillatory_pair(point, mu, pair)
    # deterministic complex phase: largest-magnitude component real positive
    k = int(np.argmax(np.abs(vec)))
    vec = vec * (np.abs(vec[k]) / vec[k])
    t = mesh.node_times
    wave = np.real(vec[None, :] * np.exp(2j * np.pi * t)[:, None])
    dwave = np.real(2j * np.pi * vec[None, :] * np.exp(2j * np.pi * t)[:, None])
    T0 = 2.0 * np.pi / omega
    base = MeshedSolution(mesh, np.tile(point.state, (mesh.n_nodes, 1)),
                          {"T": T0, "sigma": 0.0})
    tangent = Tangent(wave, {"T": 0.0, "sigma": 0.0})
    normalize_tangent(mesh, tangent)
    problem.data["phase_ref"] = dwave
    return ContinuationFrame(base, tangent, ds0)


@dataclass
class PeriodicOrbit:
    """A converged family member with its Floquet data."""

    solution: MeshedSolution
    mu: float
    family: str = ""
    multipliers: np.ndarray = None
    ill_conditioned: bool = False

    @property
    def T(self):
        return self.solution.scalars["T"]

    @property
    def sigma(self):
        return self.solution.scalars["sigma"]

    @property
    def energy(self):
        return float(dyn.energy(self.solution.values[0], self.mu))

    def exponents(self):
        return nontrivial_exponents(self.multipliers)


def variational_matrix(sol, mu):
    """Callback A(t) = T f_u(u(t), 0) for monodromy/eigenfunction work."""
    T = sol.scalars["T"]

    def amat(t, Y):
        return T * dyn.jacobian(Y, mu, 0.0)

    return amat


def orbit_multipliers(sol, mu):
    return floquet_multipliers(sol, variational_matrix(sol, mu))


def pairing_defect(mults):
    """Worst |a*b - 1| over a greedy reciprocal pairing of the multipliers."""
    left = list(mults)
    worst = 0.0
    while left:
        a = left.pop()
        j = int(np.argmin([abs(a * b - 1.0) for b in left]))
        b = left.pop(j)
        worst = max(worst, abs(a * b - 1.0))
    return worst


def trivial_defect(mults):
    """Distance from 1 of the two multipliers nearest 1."""
    d = np.sort(np.abs(np.asarray(mults) - 1.0))
    return float(d[1])


def nontrivial_exponents(mults):
    """(unstable exponent, unit-circle angle/2pi) of the nontrivial pairs.

    Returns a dict with keys 'lambda' (ln of the largest real multiplier
    magnitude; None if the dominant pair is complex) and 'angle' (positive
    argument of the unit-circle pair divided by 2*pi; None if that pair is
    real).  Suits the common spectrum {1, 1, a, 1/a, e^{+-i theta}}.
    """
    mults = np.asarray(mults)
    idx = np.argsort(np.abs(mults - 1.0))
    nontriv = np.delete(mults, idx[:2])
    out = {"lambda": None, "angle": None}
    mags = np.abs(nontriv)
    big = nontriv[np.argmax(mags)]
    if abs(big.imag) < 1e-6 * abs(big) and big.real > 0 and abs(big) > 1.0 + 1e-9:
        out["lambda"] = float(np.log(big.real))
    complex_pair = nontriv[np.abs(nontriv.imag) > 1e-6 * np.abs(nontriv)]
    on_circle = [m for m in complex_pair if abs(abs(m) - 1.0) < 1e-3]
    if on_circle:
        ang = abs(np.angle(on_circle[0]))
        out["angle"] = float(ang / (2.0 * np.pi))
    return out


@dataclass
class FamilyResult:
    orbits: list
    records: list
    events: list
    reason: str
    frame: ContinuationFrame


def default_stops():
    def window(sol, rec):
        if not ENERGY_WINDOW[0] <= rec["E"] <= ENERGY_WINDOW[1]:
            return "energy_window"
        if sol.scalars["T"] > PERIOD_CAP:
            return "period_cap"
        return None

    return [window]


def compute_family(problem, frame, mu, *, family="", controls=None,
                   floquet=True, stop_at=None):
    """March an orbit family; returns orbits with Floquet data attached."""
    orbits = []

    def on_accept(sol, rec):
        orbit = PeriodicOrbit(sol, mu, family)
        if floquet:
            mults, ill = orbit_multipliers(sol, mu)
            orbit.multipliers = mults
            orbit.ill_conditioned = ill
            expo = orbit.exponents()
            rec["lambda_u"] = expo["lambda"]
            rec["angle"] = expo["angle"]
            rec["pairing_defect"] = pairing_defect(mults)
            rec["trivial_defect"] = trivial_defect(mults)
        rec["ill_conditioned"] = orbit.ill_conditioned if floquet else False
        orbits.append(orbit)

    c = controls or Controls()
    c.monitors.setdefault("E", lambda s: float(dyn.energy(s.values[0], mu)))
    if not c.stop:
        c.stop = default_stops()
    if stop_at is not None:
        c.stop_at = stop_at
    c.on_accept = on_accept
    result = run_continuation(problem, frame, c)
    # orbits collected for every accepted step; keep those matching stored solutions
    stored = {id(s) for s in result.solutions}
    kept = [o for o in orbits if id(o.solution) in stored]
    return FamilyResult(kept, result.records, result.events, result.reason,
                        result.frame)


def solve_fixed(problem, sol, tol=1e-10, max_iter=10):
    """Plain Newton solve (no continuation row); needs an isolated problem."""
    system = CollocationSystem(problem, sol.mesh)
    return system.solve(sol, tol=tol, max_iter=max_iter)


def refine_to_energy(sol, mu, e_target, tol=1e-10):
    """Land exactly on the family member with energy e_target."""
    problem = periodic_problem(mu, free=("T", "sigma"), pin_energy=e_target)
    problem.update_reference(sol)
    res = solve_fixed(problem, sol, tol=tol)
    return res.solution


def continue_to_energy(sol, mu, e_target, ds0=1e-2, max_steps=300, tol=1e-10):
    """March along the family from sol until it lands on energy e_target.

    refine_to_energy pins the energy in a single Newton solve and only works
    when sol is already close to the target member; this walks the family for
    arbitrary in-family distances.  Orientation is found by trial: run a few
    steps, and if the energy gap grows, restart the other way.
    """
    problem = periodic_problem(mu)
    problem.update_reference(sol)
    system = CollocationSystem(problem, sol.mesh)
    e0 = float(dyn.energy(sol.values[0], mu))
    d0 = abs(e0 - e_target)
    if d0 <= tol:
        return sol
    for orient in (1.0, -1.0):
        guess = Tangent(np.zeros_like(sol.values), {"T": orient, "sigma": 0.0})
        tangent, _ = compute_tangent(system, sol, guess)

        def wrong_way(s, rec, _d0=d0):
            if rec["step"] >= 5 and abs(rec["E"] - e_target) > 1.5 * _d0 + 1e-4:
                return "wrong_way"
            return None

        c = Controls(max_steps=max_steps,
                     monitors={"E": lambda s: float(dyn.energy(s.values[0], mu))},
                     stop_at=("E", float(e_target), 1e-12),
                     stop=[wrong_way])
        result = run_continuation(problem, ContinuationFrame(sol.copy(), tangent, ds0), c)
        if result.reason == "target":
            return refine_to_energy(result.solutions[-1], mu, e_target, tol=tol)
    raise NoConvergence(f"no family member at E={e_target} reachable from E={e0}")


def refine_to_period(sol, mu, t_target, tol=1e-10):
    """Land exactly on the family member with period t_target."""
    problem = periodic_problem(mu, free=("sigma",))
    problem.update_reference(sol)
    fixed = sol.copy()
    fixed.scalars["T"] = t_target
    res = solve_fixed(problem, fixed, tol=tol)
    return res.solution


def mirror_z(sol, mu, tol=1e-10):
    """z-reflected counterpart (southern <-> northern); re-converged."""
    out = sol.copy()
    out.values[:, 2] *= -1.0
    out.values[:, 5] *= -1.0
    problem = periodic_problem(mu, free=("sigma",))
    problem.update_reference(out)
    return solve_fixed(problem, out, tol=tol).solution


def weighted_mean_z(sol):
    w = sol.mesh.node_weights
    return float(w @ sol.values[:, 2])


def peak_z(sol):
    z = sol.values[:, 2]
    return float(z[np.argmax(np.abs(z))])


def switch_to_bifurcating_family(problem, event, mu, through_tangent=None,
                                 ds0=1e-2, prefer_z="north", tol=1e-8):
    """Branch-switch at a periodic-orbit branch point and take one step.

    Returns (first solution on the new branch, frame ready to continue).
    prefer_z picks the sign of the symmetry-broken branch when it separates
    north/south (peak z positive for 'north'); use None to take whichever
    orientation the null vector gives.
    """
    if through_tangent is None:
        through_tangent = event.info["tangent"]
    frame = branch_switch(problem, event, through_tangent, ds0)
    problem.update_reference(frame.solution)
    from .continuation import continuation_step

    system = CollocationSystem(problem, frame.solution.mesh)
    last_exc = None
    for attempt in range(2):
        try:
            res = continuation_step(system, frame, tol=tol)
        except Exception as exc:     # retry with a flipped direction
            last_exc = exc
            frame.tangent.values = -frame.tangent.values
            frame.tangent.scalars = {k: -v
                                     for k, v in frame.tangent.scalars.items()}
            continue
        sol = res.solution
        if prefer_z and peak_z(sol) != 0.0:
            want = 1.0 if prefer_z == "north" else -1.0
            if np.sign(peak_z(sol)) != want:
                flipped = sol.copy()
                flipped.values[:, 2] *= -1.0
                flipped.values[:, 5] *= -1.0
                sol = flipped
                frame.tangent.values = frame.tangent.values.copy()
                frame.tangent.values[:, 2] *= -1.0
                frame.tangent.values[:, 5] *= -1.0
        problem.update_reference(sol)
        from .continuation import compute_tangent

        tan, _ = compute_tangent(system, sol, frame.tangent)
        return sol, ContinuationFrame(sol, tan, frame.ds)
    raise BranchSwitchFailure(f"could not step onto the new branch: {last_exc}")
