"""Pseudo-arclength continuation of collocation BVP solutions.

The continuation unknown is the pair (solution function, free scalars); steps
are closed by Keller's constraint

    integral <w - w0, w0'> dt  +  <p - p0, p0'>  =  ds

with (w0', p0') the normalized tangent at the previous solution.  The driver
adapts the step length from Newton iteration counts, watches the bordered
Jacobian's determinant sign for branch points, flags folds from tangent
components and monitor differences, re-adapts the mesh on a cadence, and
supports landing exactly on a monitor target (e.g. a requested period).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import splu

from .collocation import (CollocationSystem, MeshedSolution, adapt_mesh,
                          lu_det_sign, refine_mesh)
from .errors import NoConvergence


class StepFailure(RuntimeError):
    """A continuation step's corrector did not converge."""


class RankDeficient(RuntimeError):
    """Bordered system singular where a regular point was expected."""


@dataclass
class Tangent:
    """Direction in (function, free scalars) space."""

    values: np.ndarray            # (n_nodes, dim)
    scalars: dict                 # keyed by the problem's free names

    def copy(self):
        return Tangent(self.values.copy(), dict(self.scalars))


def inner(mesh, a_values, a_scalars, b_values, b_scalars):
    """Combined inner product: integral of <a, b> plus the scalar dot."""
    w = mesh.node_weights
    dot = float(np.sum(w[:, None] * a_values * b_values))
    for k in a_scalars:
        dot += a_scalars[k] * b_scalars[k]
    return dot


def tangent_norm(mesh, tan):
    return np.sqrt(inner(mesh, tan.values, tan.scalars, tan.values, tan.scalars))


def normalize_tangent(mesh, tan):
    n = tangent_norm(mesh, tan)
    if n == 0.0 or not np.isfinite(n):
        raise RankDeficient("tangent has zero or non-finite norm")
    tan.values /= n
    tan.scalars = {k: v / n for k, v in tan.scalars.items()}
    return tan


class ArclengthRow:
    """Keller's closure row anchored at a reference solution and tangent."""

    def __init__(self, reference, tangent, ds):
        self.ref_values = reference.values
        self.ref_scalars = dict(reference.scalars)
        self.tangent = tangent
        self.ds = ds
        self.weights = reference.mesh.node_weights

    def residual(self, sol):
        out = float(np.sum(self.weights[:, None] * (sol.values - self.ref_values)
                           * self.tangent.values))
        for k, tp in self.tangent.scalars.items():
            out += (sol.scalars[k] - self.ref_scalars[k]) * tp
        return out - self.ds

    def gradient(self, sol, free):
        gv = self.weights[:, None] * self.tangent.values
        gp = np.array([self.tangent.scalars[k] for k in free])
        return gv, gp


@dataclass
class ContinuationFrame:
    solution: MeshedSolution
    tangent: Tangent
    ds: float


@dataclass
class BranchEvent:
    kind: str                     # Fold | BranchPoint | UserFunctionZero | NoConvergenceStop
    location: MeshedSolution
    info: dict = field(default_factory=dict)


def continuation_step(system, frame, tol=1e-8, max_iter=10):
    """One predictor/corrector step of length frame.ds.  Raises StepFailure."""
    pred = frame.solution.copy()
    pred.values = pred.values + frame.ds * frame.tangent.values
    for k, tp in frame.tangent.scalars.items():
        pred.scalars[k] = pred.scalars[k] + frame.ds * tp
    row = ArclengthRow(frame.solution, frame.tangent, frame.ds)
    try:
        return system.solve(pred, extra_row=row, tol=tol, max_iter=max_iter)
    except NoConvergence as exc:
        raise StepFailure(str(exc)) from exc


def compute_tangent(system, sol, prev_tangent):
    """Normalized null direction of the constraint linearization at sol,
    oriented to continue the previous tangent."""
    row = ArclengthRow(sol, prev_tangent, 0.0)
    J = system.jacobian(sol, extra_row=row)
    try:
        lu = splu(J)
    except RuntimeError as exc:
        raise RankDeficient(str(exc)) from exc
    rhs = np.zeros(system.ndof)
    rhs[-1] = 1.0
    t = lu.solve(rhs)
    if not np.all(np.isfinite(t)):
        raise RankDeficient("bordered solve produced non-finite tangent")
    nvals = sol.mesh.n_nodes * system.problem.dim
    tan = Tangent(t[:nvals].reshape(-1, system.problem.dim),
                  {k: float(t[nvals + i]) for i, k in enumerate(system.problem.free)})
    normalize_tangent(sol.mesh, tan)
    if inner(sol.mesh, tan.values, tan.scalars,
             prev_tangent.values, prev_tangent.scalars) < 0.0:
        tan.values = -tan.values
        tan.scalars = {k: -v for k, v in tan.scalars.items()}
    return tan, lu


def adapt_step(ds, iterations, ds_min, ds_max):
    """Grow/shrink the step from the corrector's iteration count."""
    growth = 1.3 if iterations <= 3 else (1.0 if iterations <= 5 else 0.5)
    mag = min(max(abs(ds) * growth, ds_min), ds_max)
    return np.sign(ds) * mag


@dataclass
class Controls:
    """Knobs for run_continuation; defaults suit the orbit families."""

    ds_min: float = 1e-8
    ds_max: float = 0.5
    max_steps: int = 500
    tol: float = 1e-8
    max_iter: int = 10
    adapt_every: int = 5          # mesh adaptation cadence (0 = never)
    detect_branch_points: bool = True
    fold_tol: float = 1e-6        # ignore sign flips of components below this
    monitors: dict = field(default_factory=dict)     # name -> fn(sol) -> float
    stop: list = field(default_factory=list)         # fn(sol, record) -> reason | None
    stop_at: tuple = None         # (monitor_or_scalar, value, tol)
    stop_at_skip: int = 0         # sign changes of the target to pass first
    store_every: int = 1
    max_intervals: int = 1500
    error_cap: float = None       # auto-double N when adapt error estimate exceeds
    on_accept: callable = None    # fn(sol, record) -> None, may enrich record


@dataclass
class BranchResult:
    solutions: list
    records: list
    events: list
    reason: str
    frame: ContinuationFrame = None


def _monitor_values(sol, controls):
    vals = dict(sol.scalars)
    for name, fn in controls.monitors.items():
        vals[name] = float(fn(sol))
    return vals


def run_continuation(problem, frame, controls=None):
    """March a family from `frame` until a stop condition fires.

    Returns a BranchResult whose records hold, per accepted step: scalars,
    monitors, step size, iteration count, determinant sign, and cumulative
    arclength.  Events carry refined branch points, folds, and the terminal
    step-underflow marker.
    """

    c = controls or Controls()
    system = CollocationSystem(problem, frame.solution.mesh)
    solutions, records, events = [], [], []
    reason = "max_steps"
    arclength = 0.0
    prev_monitors = _monitor_values(frame.solution, c)
    prev_det = None
    prev_tangent_scalars = dict(frame.tangent.scalars)
    step_idx = 0
    crossings_skipped = 0

    def record_step(sol, res, ds):
        rec = {"step": step_idx, "ds": ds, "arclength": arclength,
               "iterations": res.iterations, "det_sign": res.det_sign,
               "logabsdet": res.logabsdet}
        rec.update(_monitor_values(sol, c))
        if c.on_accept is not None:
            c.on_accept(sol, rec)
        records.append(rec)
        stored = bool(c.store_every) and step_idx % c.store_every == 0
        if stored:
            solutions.append(sol)
        return rec, stored

    while step_idx < c.max_steps:
        try:
            res = continuation_step(system, frame, tol=c.tol, max_iter=c.max_iter)
        except StepFailure:
            if abs(frame.ds) / 2.0 < c.ds_min:
                events.append(BranchEvent("NoConvergenceStop", frame.solution,
                                          {"ds": frame.ds}))
                reason = "step_underflow"
                break
            frame = ContinuationFrame(frame.solution, frame.tangent, frame.ds / 2.0)
            continue

        step_idx += 1
        sol = res.solution
        arclength += abs(frame.ds)
        cur_monitors = _monitor_values(sol, c)

        # branch points: determinant sign change of the bordered system
        if (c.detect_branch_points and prev_det is not None
                and res.det_sign != 0 and prev_det != 0
                and res.det_sign != prev_det):
            ev = _refine_branch_point(system, frame, res, c)
            if ev is not None:
                events.append(ev)

        # folds: free-scalar tangent components and monitor differences
        new_tangent, lu = compute_tangent(system, sol, frame.tangent)
        for name in system.problem.free:
            a, b = prev_tangent_scalars.get(name), new_tangent.scalars[name]
            if (a is not None and a * b < 0.0
                    and max(abs(a), abs(b)) > c.fold_tol):
                events.append(BranchEvent("Fold", sol,
                                          {"scalar": name, "tangent": (a, b)}))
        for name in c.monitors:
            if name.startswith("_"):
                continue          # helper monitors opt out of fold detection
            d_prev = prev_monitors.get("_d_" + name)
            d_new = cur_monitors[name] - prev_monitors[name]
            if (d_prev is not None and d_prev * d_new < 0.0
                    and max(abs(d_prev), abs(d_new)) > c.fold_tol):
                events.append(BranchEvent("Fold", sol,
                                          {"monitor": name,
                                           "value": cur_monitors[name]}))
            cur_monitors["_d_" + name] = d_new

        rec, stored = record_step(sol, res, frame.ds)

        # target landing
        if c.stop_at is not None:
            name, value, ttol = c.stop_at
            a = prev_monitors.get(name)
            b = cur_monitors.get(name)
            if a is not None and b is not None and (a - value) * (b - value) <= 0.0:
                if crossings_skipped < c.stop_at_skip:
                    crossings_skipped += 1
                    sol2 = None
                else:
                    sol2, res2 = _refine_target(system, frame, c, name, value, ttol)
                if sol2 is not None:
                    sol = sol2
                    rec["iterations"] = res2.iterations
                    rec["det_sign"] = res2.det_sign
                    rec["logabsdet"] = res2.logabsdet
                    rec.update(_monitor_values(sol, c))
                    if c.on_accept is not None:
                        c.on_accept(sol, rec)
                    if stored:
                        solutions[-1] = sol
                    else:
                        solutions.append(sol)
                    new_tangent, _ = compute_tangent(system, sol, frame.tangent)
                    reason = "target"
                    frame = ContinuationFrame(sol, new_tangent, frame.ds)
                    break

        stop_reason = None
        for fn in c.stop:
            stop_reason = fn(sol, records[-1])
            if stop_reason:
                break
        if stop_reason:
            reason = stop_reason
            frame = ContinuationFrame(sol, new_tangent, frame.ds)
            break

        # prepare next frame
        ds = adapt_step(frame.ds, res.iterations, c.ds_min, c.ds_max)
        frame = ContinuationFrame(sol, new_tangent, ds)
        if problem.update_reference is not None:
            problem.update_reference(sol)
        prev_monitors = cur_monitors
        prev_det = res.det_sign
        prev_tangent_scalars = dict(new_tangent.scalars)

        # mesh maintenance
        if c.adapt_every and step_idx % c.adapt_every == 0:
            new_frame, new_system, new_det = _re_mesh(problem, frame, system, c)
            if new_system is not system:
                # determinant signs are not comparable across a mesh change;
                # the re-solve on the new mesh supplies the fresh baseline
                prev_det = new_det
            frame, system = new_frame, new_system

    return BranchResult(solutions, records, events, reason, frame)


def _re_mesh(problem, frame, system, c):
    """Adapt (or when saturated, refine) the mesh and reconverge.

    Returns (frame, system, det_sign of the re-solve on the new mesh)."""
    sol = frame.solution
    new_sol, info = adapt_mesh(sol)
    if not info.get("changed"):
        return frame, system, None
    m = new_sol.mesh.degree
    if c.error_cap is not None:
        err = info["monitor_max"] * np.max(np.diff(new_sol.mesh.points))
        if err ** (m + 1) > c.error_cap and sol.mesh.n_intervals * 2 <= c.max_intervals:
            new_sol = refine_mesh(new_sol, 2)
    new_system = CollocationSystem(problem, new_sol.mesh)
    helper = MeshedSolution(sol.mesh, frame.tangent.values)
    tan = Tangent(helper.evaluate(new_sol.mesh.node_times), dict(frame.tangent.scalars))
    normalize_tangent(new_sol.mesh, tan)
    if problem.update_reference is not None:
        problem.update_reference(new_sol)
    try:
        res = new_system.solve(new_sol, extra_row=ArclengthRow(new_sol, tan, 0.0),
                               tol=c.tol, max_iter=c.max_iter)
    except NoConvergence:
        return frame, system, None   # keep the old mesh; better luck next cadence
    new_tan, _ = compute_tangent(new_system, res.solution, tan)
    if problem.update_reference is not None:
        problem.update_reference(res.solution)
    return ContinuationFrame(res.solution, new_tan, frame.ds), new_system, res.det_sign


def _refine_branch_point(system, frame, res, c):
    """Bisect the step interval until the sign flip is localized to ds*1e-3."""
    lo, hi = 0.0, frame.ds
    sign_lo = None
    base = ContinuationFrame(frame.solution, frame.tangent, frame.ds)
    best = None
    for _ in range(14):
        if abs(hi - lo) <= abs(frame.ds) * 1e-3:
            break
        mid = 0.5 * (lo + hi)
        try:
            probe = continuation_step(
                system, ContinuationFrame(base.solution, base.tangent, mid),
                tol=c.tol, max_iter=c.max_iter)
        except StepFailure:
            break
        if probe.det_sign == res.det_sign:
            hi = mid
            best = probe
        else:
            lo = mid
    if best is None:
        best = res
    return BranchEvent("BranchPoint", best.solution,
                       {"logabsdet": best.logabsdet,
                        "logabsdet_step": res.logabsdet,
                        "ds_bracket": (lo, hi), "ds": frame.ds,
                        "tangent": frame.tangent})


def _refine_target(system, frame, c, name, value, ttol):
    """Secant iteration on the step length to land monitor `name` on value."""
    def measure(sol):
        if name in c.monitors:
            return float(c.monitors[name](sol))
        return float(sol.scalars[name])

    a_ds, a_val = 0.0, measure(frame.solution)
    b_ds, b_val = frame.ds, None
    sol = None
    for _ in range(12):
        if b_val is None:
            try:
                res = continuation_step(system,
                                        ContinuationFrame(frame.solution,
                                                          frame.tangent, b_ds),
                                        tol=c.tol, max_iter=c.max_iter)
            except StepFailure:
                return None, None
            sol, b_val = res.solution, measure(res.solution)
        if abs(b_val - value) < ttol:
            return sol, res
        if b_val == a_val:
            return None, None
        new_ds = b_ds + (value - b_val) * (b_ds - a_ds) / (b_val - a_val)
        a_ds, a_val = b_ds, b_val
        b_ds, b_val = new_ds, None
    return None, None


def branch_switch(problem, event, through_tangent, ds0, seed=0):
    """Frame pointing along the second null direction at a branch point.

    Inverse iteration on the bordered Jacobian (which is singular at the
    branch point precisely in the direction orthogonal to the through
    tangent), then explicit orthogonalization against the through tangent.
    """
    from .errors import BranchSwitchFailure

    sol = event.location
    system = CollocationSystem(problem, sol.mesh)
    row = ArclengthRow(sol, through_tangent, 0.0)
    try:
        lu = splu(system.jacobian(sol, extra_row=row))
    except RuntimeError as exc:
        raise BranchSwitchFailure(f"bordered factorization failed: {exc}") from exc
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(system.ndof)
    nvals = sol.mesh.n_nodes * problem.dim
    for _ in range(5):
        z = lu.solve(z)
        norm = np.linalg.norm(z)
        if not np.isfinite(norm) or norm == 0.0:
            raise BranchSwitchFailure("inverse iteration degenerate")
        z /= norm
    tan = Tangent(z[:nvals].reshape(-1, problem.dim),
                  {k: float(z[nvals + i]) for i, k in enumerate(problem.free)})
    normalize_tangent(sol.mesh, tan)
    overlap = inner(sol.mesh, tan.values, tan.scalars,
                    through_tangent.values, through_tangent.scalars)
    tan.values -= overlap * through_tangent.values
    tan.scalars = {k: v - overlap * through_tangent.scalars[k]
                   for k, v in tan.scalars.items()}
    try:
        normalize_tangent(sol.mesh, tan)
    except RankDeficient as exc:
        raise BranchSwitchFailure("second null direction degenerate") from exc
    return ContinuationFrame(sol, tan, ds0)
