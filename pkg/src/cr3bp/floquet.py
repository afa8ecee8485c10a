"""Floquet eigenfunctions by continuation in the eigenfunction norm.

The orbit BVP is extended with the linearized flow: states (u, v) in R^12,
scalars (T, sigma, lambda, rho), equations

    u' = T f(u, sigma)
    v' = T f_u(u, 0) v - lambda v

with periodicity in u, the boundary sign condition v(1) = +-v(0), the usual
phase integral on u, and the normalization <v(0), v(0)> = rho.  The zero
eigenfunction (v = 0, rho = 0) solves this for any lambda; the true exponent
is a branch point of that trivial family, and marching the bifurcating branch
until rho = 1 delivers the unit eigenfunction.  The Floquet multiplier of the
converged packet is sign * e^lambda.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .collocation import (BvpProblem, CollocationSystem, IntegralTerm,
                          MeshedSolution, monodromy, propagate_variational)
from .continuation import ContinuationFrame, Controls, Tangent, \
    normalize_tangent, run_continuation
from .errors import NotSimpleEigenvalue
from .orbits import variational_matrix

SCALARS = ("T", "sigma", "lam", "rho")


def extended_problem(mu, free=("sigma", "lam", "rho"), sign=1):
    """Coupled orbit/eigenfunction BVP of dimension 12.

    free picks the run mode: ('sigma','lam','rho') grows the eigenfunction at
    a pinned orbit, ('sigma','lam') is the isolated polish at fixed rho, and
    ('sigma','lam','T') continues a packet along its orbit family.
    """

    data = {}

    def split(Y):
        return Y[..., :6], Y[..., 6:]

    def rhs(t, Y, s):
        u, v = split(Y)
        du = s["T"] * dyn.vector_field(u, s["sigma"], mu)
        Av = np.einsum("...ij,...j->...i", dyn.jacobian(u, mu, 0.0), v)
        dv = s["T"] * Av - s["lam"] * v
        return np.concatenate([du, dv], axis=-1)

    def rhs_jac_y(t, Y, s):
        u, v = split(Y)
        K = Y.shape[0]
        J = np.zeros((K, 12, 12))
        J[:, :6, :6] = s["T"] * dyn.jacobian(u, mu, s["sigma"])
        J[:, 6:, :6] = s["T"] * dyn.jacobian_action_gradient(u, v, mu)
        J[:, 6:, 6:] = s["T"] * dyn.jacobian(u, mu, 0.0)
        J[:, 6:, 6:] -= s["lam"] * np.eye(6)
        return J

    def rhs_jac_p(t, Y, s, free_names):
        u, v = split(Y)
        Av = np.einsum("...ij,...j->...i", dyn.jacobian(u, mu, 0.0), v)
        cols = []
        for name in free_names:
            col = np.zeros_like(Y)
            if name == "T":
                col[..., :6] = dyn.vector_field(u, s["sigma"], mu)
                col[..., 6:] = Av
            elif name == "sigma":
                col[..., 3:6] = s["T"] * u[..., 3:6]
            elif name == "lam":
                col[..., 6:] = -v
            cols.append(col)
        return np.stack(cols, axis=-1)

    def bc(y0, y1, s):
        u0, v0 = y0[:6], y0[6:]
        u1, v1 = y1[:6], y1[6:]
        return np.concatenate([u1 - u0, v1 - sign * v0,
                               [v0 @ v0 - s["rho"]]])

    def bc_jac(y0, y1, s, free_names):
        J0 = np.zeros((13, 12))
        J1 = np.zeros((13, 12))
        J0[:6, :6] = -np.eye(6)
        J0[6:12, 6:] = -sign * np.eye(6)
        J0[12, 6:] = 2.0 * y0[6:]
        J1[:6, :6] = np.eye(6)
        J1[6:12, 6:] = np.eye(6)
        Jp = np.zeros((13, len(free_names)))
        for i, name in enumerate(free_names):
            if name == "rho":
                Jp[12, i] = -1.0
        return J0, J1, Jp

    def phase_value(t, Y, s):
        return np.sum(Y[:, :6] * data["phase_ref"], axis=1)

    def phase_jac_y(t, Y, s):
        out = np.zeros((Y.shape[0], 12))
        out[:, :6] = data["phase_ref"]
        return out

    def phase_jac_p(t, Y, s, free_names):
        return np.zeros((Y.shape[0], len(free_names)))

    problem = BvpProblem(
        dim=12, rhs=rhs, rhs_jac_y=rhs_jac_y, rhs_jac_p=rhs_jac_p,
        bc=bc, bc_jac=bc_jac, n_bc=13,
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
class EigenPacket:
    """Unit-norm Floquet eigenfunction of a periodic orbit."""

    extended: MeshedSolution      # 12-dim (u, v) with scalars T/sigma/lam/rho
    mu: float
    sign: int = 1
    growth_records: list = field(default_factory=list)

    @property
    def lam(self):
        return self.extended.scalars["lam"]

    @property
    def rho(self):
        return self.extended.scalars["rho"]

    @property
    def T(self):
        return self.extended.scalars["T"]

    @property
    def multiplier(self):
        return self.sign * np.exp(self.lam)

    @property
    def orbit_values(self):
        return self.extended.values[:, :6]

    def eigenfunction(self):
        return MeshedSolution(self.extended.mesh, self.extended.values[:, 6:],
                              {"lam": self.lam, "rho": self.rho})


def select_unstable_multiplier(mults):
    """The real positive multiplier off the unit circle, checked simple.

    Raises NotSimpleEigenvalue when the dominant multiplier is complex, on
    the unit circle, negative, or shared with another multiplier.
    """
    mults = np.asarray(mults)
    m = mults[np.argmax(np.abs(mults))]
    if abs(m.imag) > 1e-9 * abs(m):
        raise NotSimpleEigenvalue(f"dominant multiplier {m} is complex")
    if m.real <= 0.0:
        raise NotSimpleEigenvalue(f"dominant multiplier {m} is negative")
    if abs(m) < 1.0 + 1e-6:
        raise NotSimpleEigenvalue("no multiplier off the unit circle")
    others = mults[np.abs(mults - m) > 0]
    if others.size == mults.size:
        others = np.delete(mults, np.argmax(np.abs(mults)))
    if np.any(np.abs(others - m) < 1e-6 * abs(m)):
        raise NotSimpleEigenvalue(f"multiplier {m.real} is not simple")
    return float(m.real)


def seed_frame(problem, orbit_sol, mu, ds0=0.1):
    """Branch-point frame for eigenfunction growth at a converged orbit.

    The base solution is (u, v=0, rho=0) with lambda seeded from the orbit's
    monodromy; the tangent is the discrete eigenfunction prediction
    e^{-lambda t} * Phi(t) w0, which makes the first step converge onto the
    bifurcating branch without inverse iteration.
    """
    amat = variational_matrix(orbit_sol, mu)
    M = monodromy(orbit_sol, amat)
    mults = np.linalg.eigvals(M)
    target = select_unstable_multiplier(mults)
    lam = float(np.log(target))

    vals, vecs = np.linalg.eig(M)
    k = int(np.argmin(np.abs(vals - target)))
    w0 = np.real(vecs[:, k])
    w0 /= np.linalg.norm(w0)
    # deterministic orientation: largest component positive
    j = int(np.argmax(np.abs(w0)))
    if w0[j] < 0:
        w0 = -w0

    w = propagate_variational(orbit_sol, amat, w0)
    t = orbit_sol.mesh.node_times
    vhat = np.exp(-lam * t)[:, None] * w

    base_values = np.hstack([orbit_sol.values, np.zeros_like(orbit_sol.values)])
    scalars = {"T": orbit_sol.scalars["T"],
               "sigma": orbit_sol.scalars.get("sigma", 0.0),
               "lam": lam, "rho": 0.0}
    base = MeshedSolution(orbit_sol.mesh, base_values, scalars)
    tangent = Tangent(np.hstack([np.zeros_like(orbit_sol.values), vhat]),
                      {k: 0.0 for k in problem.free})
    normalize_tangent(orbit_sol.mesh, tangent)
    problem.update_reference(base)
    return ContinuationFrame(base, tangent, ds0), lam


def grow_eigenfunction(orbit_sol, mu, *, sign=1, ds0=0.1, rho_target=1.0,
                       tol=1e-10, max_steps=60):
    """March the bifurcating branch from v=0 until rho = rho_target.

    Ends with an isolated polish at exactly rho_target (free sigma, lambda).
    The growth keeps T pinned; records land in the packet for drift checks.
    """
    problem = extended_problem(mu, free=("sigma", "lam", "rho"), sign=sign)
    frame, lam_seed = seed_frame(problem, orbit_sol, mu, ds0=ds0)
    controls = Controls(max_steps=max_steps, tol=tol, adapt_every=0,
                        detect_branch_points=False, ds_max=2.0,
                        stop_at=("rho", rho_target, 1e-13))
    result = run_continuation(problem, frame, controls)
    if result.reason != "target":
        raise NotSimpleEigenvalue(
            f"eigenfunction growth stopped early ({result.reason}) "
            f"after {len(result.records)} steps")
    landed = result.solutions[-1]

    polish = extended_problem(mu, free=("sigma", "lam"), sign=sign)
    landed.scalars["rho"] = rho_target
    polish.update_reference(landed)
    system = CollocationSystem(polish, landed.mesh)
    res = system.solve(landed, tol=tol)
    packet = EigenPacket(res.solution, mu, sign, result.records)
    packet.growth_records.append({"lam_seed": lam_seed,
                                  "iterations": res.iterations})
    return packet


def continue_packet(packet, mu, controls=None, stop_at=None, orient="T"):
    """Continue a fixed-rho packet along its orbit family.

    Free scalars (sigma, lam, T); rho stays at the packet's value.  orient
    names the scalar whose initial tangent component is made positive.
    """
    problem = extended_problem(mu, free=("sigma", "lam", "T"),
                               sign=packet.sign)
    sol = packet.extended.copy()
    problem.update_reference(sol)
    system = CollocationSystem(problem, sol.mesh)
    from .continuation import compute_tangent

    guess = Tangent(np.zeros_like(sol.values), {"sigma": 0.0, "lam": 0.0, "T": 1.0})
    tan, _ = compute_tangent(system, sol, guess)
    if tan.scalars.get(orient, 0.0) < 0.0:
        tan.values = -tan.values
        tan.scalars = {k: -v for k, v in tan.scalars.items()}
    c = controls or Controls()
    c.monitors.setdefault("E", lambda s: float(dyn.energy(s.values[0, :6], mu)))
    if stop_at is not None:
        c.stop_at = stop_at
    frame = ContinuationFrame(sol, tan, 1e-2)
    result = run_continuation(problem, frame, c)
    packets = [EigenPacket(s, mu, packet.sign) for s in result.solutions]
    return packets, result
