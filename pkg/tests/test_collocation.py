import numpy as np
import pytest
from scipy.linalg import expm

from cr3bp.collocation import (BvpProblem, CollocationSystem, IntegralTerm,
                               Mesh, MeshedSolution, adapt_mesh,
                               floquet_multipliers, monodromy,
                               propagate_variational)
from cr3bp.errors import IllPosedProblem, NoConvergence

LN2 = float(np.log(2.0))


def exponential_problem(free=()):
    """y' = T y on [0,1] with y(0) = 1; exact solution e^{T t}."""

    def rhs(t, Y, s):
        return s["T"] * Y

    def rhs_jac_y(t, Y, s):
        return s["T"] * np.ones(Y.shape + (1,))

    def rhs_jac_p(t, Y, s, free_names):
        cols = [Y if name == "T" else np.zeros_like(Y) for name in free_names]
        return np.stack(cols, axis=-1) if cols else np.zeros(Y.shape + (0,))

    def bc(y0, y1, s):
        return np.array([y0[0] - 1.0])

    def bc_jac(y0, y1, s, free_names):
        return (np.array([[1.0]]), np.array([[0.0]]),
                np.zeros((1, len(free_names))))

    return BvpProblem(dim=1, rhs=rhs, rhs_jac_y=rhs_jac_y,
                      rhs_jac_p=rhs_jac_p, bc=bc, bc_jac=bc_jac,
                      n_bc=1, integrals=[], free=tuple(free))


def solve_exponential(n, m, guess=None, rate=LN2):
    problem = exponential_problem()
    mesh = Mesh.uniform(n, m)
    if guess is None:
        values = np.ones((mesh.n_nodes, 1))
    else:
        values = guess
    sol = MeshedSolution(mesh, values, {"T": rate})
    return CollocationSystem(problem, mesh).solve(sol, tol=1e-12)


class TestMesh:
    def test_validation(self):
        with pytest.raises(ValueError):
            Mesh(np.array([0.0, 0.5, 1.0]), 4)        # too few intervals
        with pytest.raises(ValueError):
            Mesh(np.array([0.0, 0.2, 0.4, 0.6, 0.9]), 4)   # must end at 1
        with pytest.raises(ValueError):
            Mesh(np.array([0.0, 0.4, 0.3, 0.6, 1.0]), 4)   # not increasing
        with pytest.raises(ValueError):
            Mesh.uniform(10, 1)                        # degree too low
        with pytest.raises(ValueError):
            Mesh.uniform(10, 8)                        # degree too high

    def test_node_counts(self):
        mesh = Mesh.uniform(7, 3)
        assert mesh.n_intervals == 7
        assert mesh.n_nodes == 22
        assert mesh.node_times[0] == 0.0 and mesh.node_times[-1] == 1.0
        assert np.all(np.diff(mesh.node_times) > 0)

    def test_quadrature_weights_integrate_constants(self):
        mesh = Mesh(np.array([0.0, 0.1, 0.35, 0.6, 0.85, 1.0]), 4)
        assert np.sum(mesh.node_weights) == pytest.approx(1.0, abs=1e-14)


class TestEvaluate:
    def test_nodal_values_bit_exact(self):
        mesh = Mesh.uniform(6, 4)
        rng = np.random.default_rng(0)
        values = rng.standard_normal((mesh.n_nodes, 3))
        sol = MeshedSolution(mesh, values, {})
        got = sol.evaluate(mesh.node_times)
        assert np.array_equal(got, values)

    def test_polynomial_reproduction(self):
        # data from a degree-m polynomial is reproduced at arbitrary points
        m = 4
        mesh = Mesh.uniform(5, m)
        coeffs = np.array([0.3, -1.2, 0.8, 2.0, -0.5])

        def poly(t):
            return sum(c * t ** k for k, c in enumerate(coeffs))

        values = poly(mesh.node_times)[:, None]
        sol = MeshedSolution(mesh, values, {})
        ts = np.linspace(0.0, 1.0, 173)
        assert np.max(np.abs(sol.evaluate(ts)[:, 0] - poly(ts))) < 1e-13

    def test_shape_contract(self):
        mesh = Mesh.uniform(5, 3)
        sol = MeshedSolution(mesh, np.zeros((mesh.n_nodes, 2)), {})
        assert sol.evaluate(0.5).shape == (2,)
        assert sol.evaluate([0.1, 0.9]).shape == (2, 2)


class TestSolve:
    def test_linear_ode_endpoint(self):
        res = solve_exponential(10, 4)
        assert abs(res.solution.values[-1, 0] - 2.0) < 1e-10

    def test_exact_guess_converges_immediately(self):
        mesh = Mesh.uniform(10, 4)
        values = np.exp(LN2 * mesh.node_times)[:, None]
        # nodal values of the exact solution differ from the collocation
        # solution only by the discretization error, far below tol
        problem = exponential_problem()
        sol = MeshedSolution(mesh, values, {"T": LN2})
        res = CollocationSystem(problem, mesh).solve(sol, tol=1e-8)
        assert res.iterations <= 1
        assert res.correction_norm < 1e-8

    def test_divergent_guess_raises(self):
        mesh = Mesh.uniform(10, 4)
        values = np.full((mesh.n_nodes, 1), 1e8)
        problem = exponential_problem()
        sol = MeshedSolution(mesh, values, {"T": LN2})
        # linear problem: one Newton step lands on the solution, so make the
        # iteration budget the binding constraint via max_iter=0 equivalent
        with pytest.raises(NoConvergence):
            CollocationSystem(problem, mesh).solve(sol, tol=1e-14, max_iter=1)

    def test_perturbed_solution_reconverges(self):
        res = solve_exponential(10, 4)
        rng = np.random.default_rng(42)
        noisy = res.solution.values * (1 + 1e-3 * rng.standard_normal(
            res.solution.values.shape))
        res2 = solve_exponential(10, 4, guess=noisy)
        assert np.max(np.abs(res2.solution.values
                             - res.solution.values)) < 1e-9

    def test_determinism(self):
        a = solve_exponential(8, 3).solution.values
        b = solve_exponential(8, 3).solution.values
        assert np.array_equal(a, b)

    def test_posedness_guard(self):
        # one free scalar with no compensating constraint is under-determined
        problem = exponential_problem(free=("T",))
        mesh = Mesh.uniform(5, 3)
        sol = MeshedSolution(mesh, np.ones((mesh.n_nodes, 1)), {"T": LN2})
        with pytest.raises(IllPosedProblem):
            CollocationSystem(problem, mesh).solve(sol)


class TestConvergenceOrder:
    @pytest.mark.parametrize("m", [3, 4])
    def test_superconvergent_endpoint(self, m):
        # e^{Tt} with T = 4 keeps the endpoint error above the floating
        # point floor on these meshes; error ~ h^{2m}, observed >= 2m-1
        errs = []
        for n in (4, 8, 16):
            res = solve_exponential(n, m, rate=4.0)
            errs.append(abs(res.solution.values[-1, 0] - np.exp(4.0)))
        errs = np.array(errs)
        orders = np.log2(errs[:-1] / errs[1:])
        assert np.all(orders > 2 * m - 1)


class TestMonodromy:
    def test_constant_coefficient_oscillator(self):
        # w' = A w with constant A: monodromy over [0,1] must equal expm(A)
        w = 3.0
        A = np.array([[0.0, 1.0], [-w * w, 0.0]])
        mesh = Mesh.uniform(20, 4)
        sol = MeshedSolution(mesh, np.zeros((mesh.n_nodes, 2)), {})

        def amat(t, Y):
            return np.broadcast_to(A, (len(t), 2, 2))

        M = monodromy(sol, amat)
        assert np.max(np.abs(M - expm(A))) < 1e-12

    def test_multipliers_of_saddle(self):
        lam = 2.0
        A = np.diag([lam, -lam])
        mesh = Mesh.uniform(16, 4)
        sol = MeshedSolution(mesh, np.zeros((mesh.n_nodes, 2)), {})
        mults, ill = floquet_multipliers(
            sol, lambda t, Y: np.broadcast_to(A, (len(t), 2, 2)))
        assert not ill
        mags = np.sort(np.abs(mults))
        assert mags[0] == pytest.approx(np.exp(-lam), rel=1e-12)
        assert mags[1] == pytest.approx(np.exp(lam), rel=1e-12)

    def test_ill_conditioning_flag(self):
        A = np.diag([40.0, -40.0])        # e^40 > 1e12
        mesh = Mesh.uniform(40, 4)
        sol = MeshedSolution(mesh, np.zeros((mesh.n_nodes, 2)), {})
        _, ill = floquet_multipliers(
            sol, lambda t, Y: np.broadcast_to(A, (len(t), 2, 2)))
        assert ill

    def test_propagation_matches_exact_flow(self):
        w = 2.0
        A = np.array([[0.0, 1.0], [-w * w, 0.0]])
        mesh = Mesh.uniform(20, 4)
        sol = MeshedSolution(mesh, np.zeros((mesh.n_nodes, 2)), {})
        w0 = np.array([1.0, 0.5])
        W = propagate_variational(
            sol, lambda t, Y: np.broadcast_to(A, (len(t), 2, 2)), w0)
        # superconvergence holds at interval boundaries; interior
        # collocation nodes only carry the local order
        exact = np.stack([expm(A * t) @ w0 for t in mesh.node_times])
        err = np.abs(W - exact)
        boundary = np.arange(0, mesh.n_nodes, mesh.degree)
        assert np.max(err[boundary]) < 1e-11
        assert np.max(err) < 1e-8


class TestAdaptMesh:
    def test_polynomial_data_leaves_mesh_alone(self):
        # the monitor vanishes on data the basis represents exactly, and
        # the degenerate branch must hand back an unchanged mesh
        mesh = Mesh.uniform(10, 4)
        linear = MeshedSolution(mesh, mesh.node_times[:, None].copy(), {})
        adapted, info = adapt_mesh(linear)
        assert not info["changed"]
        assert np.max(np.abs(adapted.mesh.points - mesh.points)) < 1e-6

    def test_equidistributes_boundary_layer(self):
        # steep exponential: adapted mesh concentrates near t=1
        mesh = Mesh.uniform(24, 4)
        steep = MeshedSolution(mesh,
                               np.exp(8.0 * mesh.node_times)[:, None], {})
        adapted, info = adapt_mesh(steep)
        assert info["changed"]
        widths = np.diff(adapted.mesh.points)
        assert widths[-1] < widths[0]
        assert adapted.mesh.n_intervals == steep.mesh.n_intervals

    def test_interpolates_solution(self):
        mesh = Mesh.uniform(12, 4)
        bumpy = MeshedSolution(mesh,
                               np.exp(4 * mesh.node_times ** 2)[:, None], {})
        adapted, _ = adapt_mesh(bumpy)
        ts = np.linspace(0, 1, 57)
        assert np.max(np.abs(adapted.evaluate(ts)
                             - bumpy.evaluate(ts))) < 1e-4
