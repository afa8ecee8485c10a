"""Continuation driver exercised on scalar BVPs with known solution curves.

With rhs = 0 the solution function is a constant c and the boundary
condition carves an algebraic curve in the (c, p) plane, so every feature
of the driver (folds, branch points, target landing, step control) can be
checked against the exact geometry.
"""

import numpy as np
import pytest

from cr3bp.collocation import BvpProblem, CollocationSystem, Mesh, MeshedSolution
from cr3bp.continuation import (ArclengthRow, BranchEvent, ContinuationFrame,
                                Controls, Tangent, adapt_step, branch_switch,
                                compute_tangent, inner, run_continuation,
                                tangent_norm)


def curve_problem(g, dg_dc, dg_dp):
    """rhs = 0, one free scalar p, boundary condition g(y(0), p) = 0."""

    def rhs(t, Y, s):
        return np.zeros_like(Y)

    def rhs_jac_y(t, Y, s):
        return np.zeros(Y.shape + (1,))

    def rhs_jac_p(t, Y, s, free_names):
        return np.zeros(Y.shape + (len(free_names),))

    def bc(y0, y1, s):
        return np.array([g(y0[0], s["p"])])

    def bc_jac(y0, y1, s, free_names):
        J0 = np.array([[dg_dc(y0[0], s["p"])]])
        J1 = np.array([[0.0]])
        Jp = np.array([[dg_dp(y0[0], s["p"]) if n == "p" else 0.0
                        for n in free_names]])
        return J0, J1, Jp

    return BvpProblem(dim=1, rhs=rhs, rhs_jac_y=rhs_jac_y,
                      rhs_jac_p=rhs_jac_p, bc=bc, bc_jac=bc_jac,
                      n_bc=1, integrals=[], free=("p",))


def circle_problem():
    """c^2 + p^2 = 1: a closed family with two folds in p."""
    return curve_problem(lambda c, p: c * c + p * p - 1.0,
                         lambda c, p: 2.0 * c,
                         lambda c, p: 2.0 * p)


def pitchfork_problem():
    """c (c^2 - p + 1/2) = 0: the line c = 0 crossed by a parabola."""
    return curve_problem(lambda c, p: c * (c * c - p + 0.5),
                         lambda c, p: 3.0 * c * c - p + 0.5,
                         lambda c, p: -c)


def start_frame(problem, c0, p0, dp=1.0):
    mesh = Mesh.uniform(4, 2)
    sol = MeshedSolution(mesh, np.full((mesh.n_nodes, 1), c0), {"p": p0})
    system = CollocationSystem(problem, mesh)
    guess = Tangent(np.zeros((mesh.n_nodes, 1)), {"p": dp})
    tan, _ = compute_tangent(system, sol, guess)
    return ContinuationFrame(sol, tan, 0.05)


def controls(**kw):
    kw.setdefault("adapt_every", 0)
    kw.setdefault("ds_max", 0.1)
    kw.setdefault("tol", 1e-12)
    return Controls(**kw)


class TestTangent:
    def test_norm_combines_function_and_scalars(self):
        mesh = Mesh.uniform(4, 2)
        tan = Tangent(np.ones((mesh.n_nodes, 1)), {"p": 1.0})
        assert tangent_norm(mesh, tan) == pytest.approx(np.sqrt(2.0), abs=1e-13)

    def test_tangent_on_circle(self):
        frame = start_frame(circle_problem(), 1.0, 0.0)
        # at (c, p) = (1, 0) the curve tangent is purely in p
        assert abs(frame.tangent.scalars["p"] - 1.0) < 1e-10
        assert np.max(np.abs(frame.tangent.values)) < 1e-10

    def test_orientation_follows_guess(self):
        frame = start_frame(circle_problem(), 1.0, 0.0, dp=-1.0)
        assert frame.tangent.scalars["p"] == pytest.approx(-1.0, abs=1e-10)

    def test_arclength_row_residual(self):
        frame = start_frame(circle_problem(), 1.0, 0.0)
        row = ArclengthRow(frame.solution, frame.tangent, 0.02)
        assert row.residual(frame.solution) == pytest.approx(-0.02)
        moved = frame.solution.copy()
        moved.scalars["p"] += 0.02
        assert abs(row.residual(moved)) < 1e-12


class TestStepControl:
    def test_growth_and_caps(self):
        assert adapt_step(0.1, 2, 1e-8, 0.5) == pytest.approx(0.13)
        assert adapt_step(0.1, 5, 1e-8, 0.5) == pytest.approx(0.1)
        assert adapt_step(0.1, 7, 1e-8, 0.5) == pytest.approx(0.05)
        assert adapt_step(0.45, 1, 1e-8, 0.5) == pytest.approx(0.5)
        assert adapt_step(-0.1, 1, 1e-8, 0.5) == pytest.approx(-0.13)
        assert adapt_step(1e-8, 9, 1e-8, 0.5) == pytest.approx(1e-8)


class TestCircleFamily:
    def run_circle(self, **kw):
        problem = circle_problem()
        frame = start_frame(problem, 1.0, 0.0)
        stop = kw.pop("stop", [])
        c = controls(max_steps=kw.pop("max_steps", 200), stop=stop, **kw)
        c.monitors["c"] = lambda s: float(s.values[0, 0])
        return run_continuation(problem, frame, c)

    def test_stays_on_curve(self):
        res = self.run_circle(max_steps=60)
        for rec in res.records:
            assert rec["c"] ** 2 + rec["p"] ** 2 == pytest.approx(1.0, abs=1e-9)

    def test_record_keys_and_arclength(self):
        res = self.run_circle(max_steps=30)
        need = {"step", "ds", "arclength", "iterations", "det_sign",
                "logabsdet", "p", "c"}
        assert need <= set(res.records[0])
        arcs = [r["arclength"] for r in res.records]
        assert all(b > a for a, b in zip(arcs, arcs[1:]))
        assert res.reason == "max_steps"

    def test_full_loop_arclength_and_folds(self):
        stop = [lambda s, rec: "wrapped"
                if rec["arclength"] > 4.0 and abs(rec["p"]) < 0.05
                and rec["c"] > 0.9 else None]
        res = self.run_circle(stop=stop)
        assert res.reason == "wrapped"
        # chord length of one full turn around the unit circle
        assert res.records[-1]["arclength"] == pytest.approx(2 * np.pi, abs=0.15)
        p_folds = [e for e in res.events
                   if e.kind == "Fold" and e.info.get("scalar") == "p"]
        c_folds = [e for e in res.events
                   if e.kind == "Fold" and e.info.get("monitor") == "c"]
        assert len(p_folds) == 2
        for e in p_folds:
            assert abs(e.location.scalars["p"]) > 0.97
        assert len(c_folds) >= 1
        for e in c_folds:
            assert abs(e.location.values[0, 0]) > 0.97
        assert not [e for e in res.events if e.kind == "BranchPoint"]

    def test_store_every(self):
        res = self.run_circle(max_steps=20, store_every=5)
        assert len(res.records) == 20
        assert len(res.solutions) == 4

    def test_target_landing(self):
        problem = circle_problem()
        frame = start_frame(problem, 1.0, 0.0)
        c = controls(max_steps=100, stop_at=("p", 0.5, 1e-10))
        res = run_continuation(problem, frame, c)
        assert res.reason == "target"
        assert abs(res.solutions[-1].scalars["p"] - 0.5) < 1e-10
        # first crossing: still on the upper-right arc
        assert res.solutions[-1].values[0, 0] > 0.0

    def test_target_landing_skips_crossings(self):
        problem = circle_problem()
        frame = start_frame(problem, 1.0, 0.0)
        c = controls(max_steps=200, stop_at=("p", 0.5, 1e-10), stop_at_skip=1)
        res = run_continuation(problem, frame, c)
        assert res.reason == "target"
        assert abs(res.solutions[-1].scalars["p"] - 0.5) < 1e-10
        # second crossing of p = 0.5 lies on the opposite side of the circle
        assert res.solutions[-1].values[0, 0] < 0.0

    def test_step_underflow(self):
        # a one-iteration budget with a harsh tolerance cannot converge, and
        # with ds_min pinned at the start value halving immediately underflows
        res = self.run_circle(max_steps=50, max_iter=1, tol=1e-15,
                              ds_min=0.05)
        assert res.reason == "step_underflow"
        stops = [e for e in res.events if e.kind == "NoConvergenceStop"]
        assert len(stops) == 1

    def test_determinism(self):
        a = self.run_circle(max_steps=40)
        b = self.run_circle(max_steps=40)
        assert [r["p"] for r in a.records] == [r["p"] for r in b.records]
        assert np.array_equal(a.solutions[-1].values, b.solutions[-1].values)


class TestBranchPoint:
    def run_line(self, max_steps=40):
        problem = pitchfork_problem()
        frame = start_frame(problem, 0.0, 0.0)
        c = controls(max_steps=max_steps, ds_max=0.05)
        return problem, run_continuation(problem, frame, c)

    def test_detected_and_refined(self):
        _, res = self.run_line()
        bps = [e for e in res.events if e.kind == "BranchPoint"]
        assert len(bps) == 1
        # the parabola crosses the line c = 0 at p = 1/2
        assert bps[0].location.scalars["p"] == pytest.approx(0.5, abs=5e-3)
        assert np.max(np.abs(bps[0].location.values)) < 1e-8

    def test_switch_onto_crossing_branch(self):
        problem, res = self.run_line()
        bp = [e for e in res.events if e.kind == "BranchPoint"][0]
        frame = branch_switch(problem, bp, bp.info["tangent"], 0.02)
        # the switched tangent points along c, not along p
        assert abs(frame.tangent.scalars["p"]) < 0.3
        out = run_continuation(problem, frame, controls(max_steps=25,
                                                        ds_max=0.05))
        final = out.solutions[-1]
        c0 = float(final.values[0, 0])
        assert abs(c0) > 0.1
        assert c0 ** 2 == pytest.approx(final.scalars["p"] - 0.5, abs=1e-8)


class TestMeshAdaptation:
    def test_cadence_keeps_converged_family(self):
        # adaptation on a constant-in-t solution is degenerate and must not
        # disturb the march
        problem = circle_problem()
        frame = start_frame(problem, 1.0, 0.0)
        c = controls(max_steps=30)
        c.adapt_every = 3
        res = run_continuation(problem, frame, c)
        assert len(res.records) == 30
        for rec in res.records:
            assert rec["c"] ** 2 + rec["p"] ** 2 == pytest.approx(1.0, abs=1e-9)
