"""Gauss-Legendre collocation for boundary value problems on [0, 1].

The solution is represented piecewise: on each mesh interval a polynomial of
degree m through its values at m+1 equally spaced local nodes (interval
endpoints shared between neighbors).  Collocation is imposed at the m Gauss
points of every interval, which yields superconvergent (order 2m) nodal
values.  Unknowns are the values at all N*m+1 global nodes plus the problem's
free scalars; the assembled Jacobian is solved sparsely with SuperLU, and the
sign of its determinant is tracked for branch-point detection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import splu

from .errors import IllPosedProblem, NoConvergence, NonFiniteError


@lru_cache(maxsize=None)
def basis(m):
    """Cached basis data for degree m on local nodes i/m, i=0..m."""
    return _Basis(m)


class _Basis:
    def __init__(self, m):
        if not 2 <= m <= 7:
            raise ValueError("collocation degree must be in 2..7")
        self.m = m
        nodes = np.arange(m + 1) / m
        self.nodes = nodes
        # Coefficient rows of the Lagrange basis polynomials (degree <= 7 on
        # [0,1]: direct coefficients are well conditioned enough).
        coef = np.zeros((m + 1, m + 1))
        for i in range(m + 1):
            others = np.delete(nodes, i)
            poly = P.polyfromroots(others)
            poly /= np.prod(nodes[i] - others)
            coef[i, : poly.size] = poly
        self.coef = coef
        self.dcoef = np.array([P.polyder(c) for c in coef])
        gx, gw = np.polynomial.legendre.leggauss(m)
        self.gauss_x = (gx + 1.0) / 2.0
        self.gauss_w = gw / 2.0
        self.W = self.eval_matrix(self.gauss_x)
        self.D = self.deriv_matrix(self.gauss_x)
        # exact integrals of the basis over [0,1] -> nodal quadrature weights
        self.node_weights = coef @ (1.0 / np.arange(1, m + 2))
        # constant m-th derivative of each basis polynomial
        self.mth_deriv = coef[:, m] * math.factorial(m)

    def eval_matrix(self, xi):
        """Basis values at local coordinates xi, shape (len(xi), m+1)."""
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        return np.stack([P.polyval(xi, c) for c in self.coef], axis=1)

    def deriv_matrix(self, xi):
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        return np.stack([P.polyval(xi, c) for c in self.dcoef], axis=1)


class Mesh:
    """Partition of [0,1] with a fixed polynomial degree per interval."""

    def __init__(self, points, degree):
        points = np.asarray(points, dtype=float)
        if points.ndim != 1 or points.size < 5:
            raise ValueError("mesh needs at least four intervals")
        if not (points[0] == 0.0 and points[-1] == 1.0):
            raise ValueError("mesh must span [0, 1]")
        if np.any(np.diff(points) <= 0):
            raise ValueError("mesh points must increase strictly")
        self.points = points
        self.degree = int(degree)
        self.basis = basis(self.degree)
        self.widths = np.diff(points)
        m = self.degree
        local = np.arange(m) / m
        # interval-owned nodes (first m of each) plus the final endpoint
        owned = points[:-1, None] + self.widths[:, None] * local[None, :]
        self.node_times = np.append(owned.ravel(), 1.0)
        weights = np.zeros(self.n_nodes)
        for j in range(self.n_intervals):
            weights[j * m : j * m + m + 1] += self.basis.node_weights * self.widths[j]
        self.node_weights = weights

    @classmethod
    def uniform(cls, n_intervals, degree):
        return cls(np.linspace(0.0, 1.0, n_intervals + 1), degree)

    @property
    def n_intervals(self):
        return self.points.size - 1

    @property
    def n_nodes(self):
        return self.n_intervals * self.degree + 1

    def locate(self, t):
        """Interval index and local coordinate for each time in t."""
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self.points, t, side="right") - 1,
                      0, self.n_intervals - 1)
        xi = (t - self.points[idx]) / self.widths[idx]
        return idx, xi

    def same_as(self, other):
        return (self.degree == other.degree
                and self.points.shape == other.points.shape
                and np.array_equal(self.points, other.points))


class MeshedSolution:
    """Piecewise-polynomial solution data plus its scalar parameters."""

    def __init__(self, mesh, values, scalars=None):
        values = np.asarray(values, dtype=float)
        if values.shape[0] != mesh.n_nodes:
            raise ValueError("values row count must match mesh nodes")
        self.mesh = mesh
        self.values = values
        self.scalars = dict(scalars or {})

    @property
    def dim(self):
        return self.values.shape[1]

    def copy(self):
        return MeshedSolution(self.mesh, self.values.copy(), dict(self.scalars))

    def evaluate(self, t):
        """Solution values at times t (scalar or array), shape (..., dim).

        Times matching a mesh node exactly return the stored nodal row."""
        t = np.asarray(t, dtype=float)
        scalar_in = t.ndim == 0
        tf = np.atleast_1d(t)
        idx, xi = self.mesh.locate(tf)
        B = self.mesh.basis.eval_matrix(xi)              # (K, m+1)
        node0 = idx * self.mesh.degree
        gather = node0[:, None] + np.arange(self.mesh.degree + 1)[None, :]
        V = self.values[gather]                           # (K, m+1, dim)
        out = np.einsum("ki,kid->kd", B, V)
        node_times = self.mesh.node_times
        pos = np.searchsorted(node_times, tf)
        hit = (pos < node_times.size) & (node_times[np.minimum(pos, node_times.size - 1)] == tf)
        if np.any(hit):
            out[hit] = self.values[pos[hit]]
        return out[0] if scalar_in else out

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        scalar_in = t.ndim == 0
        tf = np.atleast_1d(t)
        idx, xi = self.mesh.locate(tf)
        B = self.mesh.basis.deriv_matrix(xi)
        node0 = idx * self.mesh.degree
        gather = node0[:, None] + np.arange(self.mesh.degree + 1)[None, :]
        V = self.values[gather]
        out = np.einsum("ki,kid->kd", B, V) / self.mesh.widths[idx][:, None]
        return out[0] if scalar_in else out

    def interpolate_onto(self, mesh):
        return MeshedSolution(mesh, self.evaluate(mesh.node_times), dict(self.scalars))


@dataclass
class IntegralTerm:
    """One integral constraint: sum over nodes of q(t, y, s) with the mesh's
    exact-interpolant quadrature weights."""

    value: callable          # (t (K,), Y (K,dim), s) -> (K,)
    jac_y: callable          # -> (K, dim)
    jac_p: callable          # (t, Y, s, free) -> (K, nfree)


@dataclass
class BvpProblem:
    """First-order BVP y' = rhs(t, y, s) on [0,1] with boundary and integral
    constraints and named scalar parameters (a declared subset free).

    All callbacks are vectorized over the leading axis of t/Y.  `free` is the
    ordered tuple of scalar names treated as unknowns; remaining scalars are
    carried on solutions but held fixed.  `update_reference`, when set, is
    called by continuation drivers with each accepted solution so problems can
    re-anchor internal reference data (e.g. phase conditions).
    """

    dim: int
    rhs: callable
    rhs_jac_y: callable
    rhs_jac_p: callable
    bc: callable             # (y0, y1, s) -> (nbc,)
    bc_jac: callable         # (y0, y1, s, free) -> (nbc,dim), (nbc,dim), (nbc,nfree)
    n_bc: int
    integrals: list
    free: tuple
    update_reference: callable = None
    data: dict = field(default_factory=dict)   # problem-owned reference state

    @property
    def n_constraints(self):
        return self.n_bc + len(self.integrals)


class ExtraRow:
    """A single dense closure row (pseudo-arclength or a scalar pin)."""

    def residual(self, sol):
        raise NotImplementedError

    def gradient(self, sol, free):
        """Return (values_grad (n_nodes, dim), scalars_grad (nfree,))."""
        raise NotImplementedError


@dataclass
class SolveResult:
    solution: MeshedSolution
    iterations: int
    correction_norm: float
    residual_norm: float
    det_sign: int
    logabsdet: float
    lu: object = field(repr=False, default=None)
    factorizations: int = 0


def _perm_parity(perm):
    """Sign of a permutation given as an index array."""
    perm = np.asarray(perm)
    seen = np.zeros(perm.size, dtype=bool)
    sign = 1
    for start in range(perm.size):
        if seen[start]:
            continue
        length = 0
        j = start
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length % 2 == 0:
            sign = -sign
    return sign


def lu_det_sign(lu):
    """(sign, log|det|) of the matrix behind a SuperLU factorization."""
    diag = lu.U.diagonal()
    if np.any(diag == 0.0):
        return 0, -np.inf
    sign = _perm_parity(lu.perm_r) * _perm_parity(lu.perm_c)
    sign *= int(np.prod(np.sign(diag)))
    return sign, float(np.sum(np.log(np.abs(diag))))


class CollocationSystem:
    """Assembled discretization of one BvpProblem on one mesh.

    Caches the sparsity pattern; `solve` runs the damped-free Newton/chord
    iteration used everywhere in the toolkit.
    """

    def __init__(self, problem, mesh):
        self.problem = problem
        self.mesh = mesh
        m = mesh.degree
        N = mesh.n_intervals
        dim = problem.dim
        self.nfree = len(problem.free)
        self.ndof = mesh.n_nodes * dim + self.nfree
        b = mesh.basis
        # collocation times, flattened interval-major
        self.col_t = (mesh.points[:-1, None] + mesh.widths[:, None] * b.gauss_x[None, :]).ravel()
        self.gather = (np.arange(N)[:, None] * m + np.arange(m + 1)[None, :])  # (N, m+1) node ids

        # static triplet indices for the collocation block
        rows = np.arange(N * m * dim).reshape(N, m, dim)
        self.block_rows = np.broadcast_to(rows[:, :, None, :, None],
                                          (N, m, m + 1, dim, dim)).ravel()
        cols = (self.gather[:, None, :, None] * dim + np.arange(dim)[None, None, None, :])
        self.block_cols = np.broadcast_to(cols[:, :, :, None, :],
                                          (N, m, m + 1, dim, dim)).ravel()
        if self.nfree:
            self.par_rows = rows.ravel().repeat(self.nfree)
            pcols = mesh.n_nodes * dim + np.arange(self.nfree)
            self.par_cols = np.tile(pcols, N * m * dim)
        self.base_rows = N * m * dim

    def _check_posedness(self, extra_row):
        need = self.problem.dim + self.nfree - (1 if extra_row is not None else 0)
        if self.problem.n_constraints != need:
            raise IllPosedProblem(
                f"{self.problem.n_constraints} boundary+integral constraints, "
                f"need {need} for dim {self.problem.dim} with "
                f"{self.nfree} free scalars"
                + ("" if extra_row is None else " and a closure row"))

    # -- packing ---------------------------------------------------------

    def pack(self, sol):
        x = np.empty(self.ndof)
        x[: sol.values.size] = sol.values.ravel()
        for i, name in enumerate(self.problem.free):
            x[sol.values.size + i] = sol.scalars[name]
        return x

    def unpack(self, x, template):
        nvals = template.mesh.n_nodes * self.problem.dim
        sol = MeshedSolution(template.mesh,
                             x[:nvals].reshape(-1, self.problem.dim),
                             dict(template.scalars))
        for i, name in enumerate(self.problem.free):
            sol.scalars[name] = float(x[nvals + i])
        return sol

    # -- assembly --------------------------------------------------------

    def _collocation_values(self, sol):
        b = self.mesh.basis
        V = sol.values[self.gather]                       # (N, m+1, dim)
        Yc = np.einsum("ki,jid->jkd", b.W, V)
        Dc = np.einsum("ki,jid->jkd", b.D, V) / self.mesh.widths[:, None, None]
        return Yc, Dc

    def residual(self, sol, extra_row=None):
        p = self.problem
        Yc, Dc = self._collocation_values(sol)
        K = Yc.shape[0] * Yc.shape[1]
        f = p.rhs(self.col_t, Yc.reshape(K, p.dim), sol.scalars)
        parts = [(Dc.reshape(K, p.dim) - f).ravel()]
        y0, y1 = sol.values[0], sol.values[-1]
        parts.append(p.bc(y0, y1, sol.scalars))
        if p.integrals:
            tn = self.mesh.node_times
            w = self.mesh.node_weights
            for term in p.integrals:
                parts.append([w @ term.value(tn, sol.values, sol.scalars)])
        if extra_row is not None:
            parts.append([extra_row.residual(sol)])
        res = np.concatenate([np.asarray(q, dtype=float).ravel() for q in parts])
        if not np.all(np.isfinite(res)):
            raise NonFiniteError("residual contains NaN or inf")
        return res

    def jacobian(self, sol, extra_row=None):
        p = self.problem
        m, N, dim = self.mesh.degree, self.mesh.n_intervals, p.dim
        b = self.mesh.basis
        Yc, _ = self._collocation_values(sol)
        K = N * m
        Yf = Yc.reshape(K, dim)
        A = p.rhs_jac_y(self.col_t, Yf, sol.scalars).reshape(N, m, dim, dim)
        inv_h = 1.0 / self.mesh.widths
        eye = np.eye(dim)
        data = (b.D[None, :, :, None, None] * inv_h[:, None, None, None, None]
                * eye[None, None, None, :, :]
                - b.W[None, :, :, None, None] * A[:, :, None, :, :])
        rows = [self.block_rows]
        cols = [self.block_cols]
        datas = [data.ravel()]
        if self.nfree:
            dP = p.rhs_jac_p(self.col_t, Yf, sol.scalars, p.free)
            rows.append(self.par_rows)
            cols.append(self.par_cols)
            datas.append((-dP).ravel())
        r0 = self.base_rows
        y0, y1 = sol.values[0], sol.values[-1]
        J0, J1, Jp = p.bc_jac(y0, y1, sol.scalars, p.free)
        nbc = p.n_bc
        last = (self.mesh.n_nodes - 1) * dim
        bc_rows = np.arange(r0, r0 + nbc)
        rows.append(np.repeat(bc_rows, dim)); cols.append(np.tile(np.arange(dim), nbc))
        datas.append(np.asarray(J0, dtype=float).ravel())
        rows.append(np.repeat(bc_rows, dim)); cols.append(np.tile(last + np.arange(dim), nbc))
        datas.append(np.asarray(J1, dtype=float).ravel())
        if self.nfree:
            rows.append(np.repeat(bc_rows, self.nfree))
            cols.append(np.tile(self.mesh.n_nodes * dim + np.arange(self.nfree), nbc))
            datas.append(np.asarray(Jp, dtype=float).ravel())
        r = r0 + nbc
        tn = self.mesh.node_times
        w = self.mesh.node_weights
        for term in p.integrals:
            gy = w[:, None] * term.jac_y(tn, sol.values, sol.scalars)
            rows.append(np.full(gy.size, r)); cols.append(np.arange(gy.size))
            datas.append(gy.ravel())
            if self.nfree:
                gp = w @ term.jac_p(tn, sol.values, sol.scalars, p.free)
                rows.append(np.full(self.nfree, r))
                cols.append(self.mesh.n_nodes * dim + np.arange(self.nfree))
                datas.append(np.asarray(gp, dtype=float).ravel())
            r += 1
        if extra_row is not None:
            gv, gp = extra_row.gradient(sol, p.free)
            rows.append(np.full(gv.size, r)); cols.append(np.arange(gv.size))
            datas.append(np.asarray(gv, dtype=float).ravel())
            rows.append(np.full(self.nfree, r))
            cols.append(self.mesh.n_nodes * dim + np.arange(self.nfree))
            datas.append(np.asarray(gp, dtype=float).ravel())
            r += 1
        J = coo_matrix((np.concatenate(datas),
                        (np.concatenate(rows), np.concatenate(cols))),
                       shape=(self.ndof, self.ndof))
        return J.tocsc()

    # -- Newton/chord ----------------------------------------------------

    def solve(self, sol, extra_row=None, tol=1e-8, max_iter=10):
        """Newton with chord reuse: full steps while convergence is slow or
        young, factorization reuse once corrections drop fast."""
        self._check_posedness(extra_row)
        sol = sol.copy()
        lu = None
        det_sign, logdet = 0, 0.0
        nfact = 0
        prev_norm = None
        ratio = 1.0
        for it in range(1, max_iter + 1):
            res = self.residual(sol, extra_row)
            full = lu is None or it <= 3 or ratio > 0.1
            if full:
                lu = splu(self.jacobian(sol, extra_row))
                det_sign, logdet = lu_det_sign(lu)
                nfact += 1
            dx = lu.solve(-res)
            x = self.pack(sol) + dx
            sol = self.unpack(x, sol)
            corr = float(np.max(np.abs(dx) / (1.0 + np.abs(x))))
            ratio = corr / prev_norm if prev_norm else 1.0
            prev_norm = corr
            if corr < tol:
                final = self.residual(sol, extra_row)
                return SolveResult(sol, it, corr, float(np.max(np.abs(final))),
                                   det_sign, logdet, lu, nfact)
            if not math.isfinite(corr):
                raise NonFiniteError("Newton correction not finite")
        raise NoConvergence(f"no convergence in {max_iter} iterations "
                            f"(last correction {prev_norm:.3e})",
                            iterations=max_iter, residual_norm=prev_norm)


# -- monodromy ------------------------------------------------------------


def interval_transfer(sol, amat):
    """Per-interval transfer matrices of the linearized collocation system.

    amat(t (K,), Y (K,dim)) must return the coefficient matrix of the
    first-variational equation w' = A(t) w at the collocation points.
    Interior nodes of each interval are condensed out, leaving the maps
    G_j with w(t_{j+1}) = G_j w(t_j); their product is the monodromy matrix.
    """
    mesh = sol.mesh
    b = mesh.basis
    m, N, dim = mesh.degree, mesh.n_intervals, sol.dim
    gather = np.arange(N)[:, None] * m + np.arange(m + 1)[None, :]
    V = sol.values[gather]
    Yc = np.einsum("ki,jid->jkd", b.W, V)
    tc = (mesh.points[:-1, None] + mesh.widths[:, None] * b.gauss_x[None, :])
    A = amat(tc.ravel(), Yc.reshape(-1, dim)).reshape(N, m, dim, dim)
    eye = np.eye(dim)
    transfers = np.empty((N, dim, dim))
    for j in range(N):
        # rows: m*dim equations; columns split into node 0 and nodes 1..m
        blocks = (b.D[:, :, None, None] / mesh.widths[j] * eye
                  - b.W[:, :, None, None] * A[j][:, None, :, :])
        full = blocks.transpose(0, 2, 1, 3).reshape(m * dim, (m + 1) * dim)
        M0 = full[:, :dim]
        Mrest = full[:, dim:]
        S = np.linalg.solve(Mrest, -M0)
        transfers[j] = S[-dim:, :]
    return transfers


def monodromy(sol, amat):
    """Monodromy matrix by condensation; see `interval_transfer`."""
    transfers = interval_transfer(sol, amat)
    M = np.eye(sol.dim)
    for G in transfers:
        M = G @ M
    return M


def floquet_multipliers(sol, amat):
    """Multipliers of the monodromy map plus an ill-conditioning flag.

    The flag fires when any multiplier magnitude exceeds 1e12 (or fails to be
    finite), where the product decomposition stops being trustworthy.
    """
    M = monodromy(sol, amat)
    mults = np.linalg.eigvals(M)
    mags = np.abs(mults)
    ill = bool(np.any(~np.isfinite(mags)) or mags.max() > 1e12)
    order = np.argsort(mags)
    return mults[order], ill


def propagate_variational(sol, amat, w0):
    """Discrete solution of w' = A(t) w at every global node, from w(0)=w0.

    Consistent with the collocation discretization (same condensation as the
    monodromy), so it seeds eigenfunction solves with near-zero residual.
    """
    mesh = sol.mesh
    b = mesh.basis
    m, N, dim = mesh.degree, mesh.n_intervals, sol.dim
    gather = np.arange(N)[:, None] * m + np.arange(m + 1)[None, :]
    V = sol.values[gather]
    Yc = np.einsum("ki,jid->jkd", b.W, V)
    tc = (mesh.points[:-1, None] + mesh.widths[:, None] * b.gauss_x[None, :])
    A = amat(tc.ravel(), Yc.reshape(-1, dim)).reshape(N, m, dim, dim)
    eye = np.eye(dim)
    out = np.empty((mesh.n_nodes, dim))
    w = np.asarray(w0, dtype=float)
    for j in range(N):
        out[j * m] = w
        blocks = (b.D[:, :, None, None] / mesh.widths[j] * eye
                  - b.W[:, :, None, None] * A[j][:, None, :, :])
        full = blocks.transpose(0, 2, 1, 3).reshape(m * dim, (m + 1) * dim)
        rest = np.linalg.solve(full[:, dim:], -full[:, :dim] @ w)
        out[j * m + 1 : j * m + m + 1] = rest.reshape(m, dim)
        w = out[j * m + m]
    return out


# -- mesh adaptation -------------------------------------------------------


def adapt_mesh(sol, floor_fraction=0.01):
    """Equidistribute an estimate of the (m+1)-th solution derivative.

    Keeps the interval count; returns (new_solution, info).  Degenerate
    monitors (e.g. exactly polynomial data) leave the mesh unchanged.
    """
    mesh = sol.mesh
    m, N = mesh.degree, mesh.n_intervals
    b = mesh.basis
    gather = np.arange(N)[:, None] * m + np.arange(m + 1)[None, :]
    V = sol.values[gather]                                  # (N, m+1, dim)
    dm = np.einsum("i,jid->jd", b.mth_deriv, V) / mesh.widths[:, None] ** m
    gaps = 0.5 * (mesh.widths[:-1] + mesh.widths[1:])
    slope = np.abs(np.diff(dm, axis=0)) / gaps[:, None]     # (N-1, dim)
    scale = 1.0 + np.max(np.abs(sol.values), axis=0)
    est = np.zeros((N, sol.dim))
    est[:-1] = np.maximum(est[:-1], slope)
    est[1:] = np.maximum(est[1:], slope)
    density = np.max((est / scale) ** (1.0 / (m + 1)), axis=1)
    total = float(density @ mesh.widths)
    if not np.isfinite(total) or total <= 0.0:
        return sol.copy(), {"changed": False, "monitor_max": 0.0}
    density = np.maximum(density, floor_fraction * density.max())
    cumulative = np.concatenate([[0.0], np.cumsum(density * mesh.widths)])
    levels = np.linspace(0.0, cumulative[-1], N + 1)
    new_points = np.interp(levels, cumulative, mesh.points)
    new_points[0], new_points[-1] = 0.0, 1.0
    if np.any(np.diff(new_points) < 1e-13):
        return sol.copy(), {"changed": False, "monitor_max": float(density.max())}
    new_mesh = Mesh(new_points, m)
    out = sol.interpolate_onto(new_mesh)
    info = {"changed": True,
            "monitor_max": float(density.max()),
            "monitor_ratio": float(density.max() / max(density.min(), 1e-300))}
    return out, info


def refine_mesh(sol, factor=2):
    """Split every interval `factor` ways (used when the error monitor
    saturates on winding orbits); interval count multiplies."""
    pts = sol.mesh.points
    extra = [np.linspace(pts[j], pts[j + 1], factor + 1)[:-1]
             for j in range(pts.size - 1)]
    new_points = np.append(np.concatenate(extra), 1.0)
    new_mesh = Mesh(new_points, sol.mesh.degree)
    return sol.interpolate_onto(new_mesh)
