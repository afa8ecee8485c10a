"""Rotating-frame dynamics of the circular restricted three-body problem.

States are ``(x, y, z, vx, vy, vz)`` in the co-rotating barycentric frame with
the primaries on the x-axis: the heavy primary (mass 1-mu) at ``(-mu, 0, 0)``
and the light one (mass mu) at ``(1-mu, 0, 0)``.  Units are normalized so the
primaries' separation, their total mass, and their angular rate are all 1.

All evaluators broadcast over leading axes: a state array of shape
``(..., 6)`` yields fields of shape ``(..., 6)``, Jacobians ``(..., 6, 6)``.

The optional unfolding parameter ``sigma`` adds ``sigma * (vx, vy, vz)`` to the
acceleration rows.  It makes boundary value problems for this conservative
flow well posed; at every true solution it vanishes, so the physical field is
recovered.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CollisionError, ConvergenceError, NonFiniteError, NotOscillatory

#: Primary-centered distance below which the field is declared singular.
COLLISION_RADIUS = 1e-12


def primary_positions(mu):
    """Positions of the heavy and light primary on the x-axis."""
    return np.array([-mu, 0.0, 0.0]), np.array([1.0 - mu, 0.0, 0.0])


def _offsets(state, mu):
    """Offsets d1, d2 from each primary and their norms r1, r2.

    Raises CollisionError/NonFiniteError; every public evaluator funnels
    through here so the guards apply uniformly.
    """
    pos = state[..., :3]
    if not np.all(np.isfinite(state)):
        raise NonFiniteError("state contains NaN or inf")
    d1 = pos.copy()
    d1[..., 0] += mu
    d2 = pos.copy()
    d2[..., 0] -= 1.0 - mu
    r1 = np.sqrt(np.sum(d1 * d1, axis=-1))
    r2 = np.sqrt(np.sum(d2 * d2, axis=-1))
    if np.any(r1 < COLLISION_RADIUS) or np.any(r2 < COLLISION_RADIUS):
        raise CollisionError("state within collision radius of a primary")
    return d1, d2, r1, r2


def gravity(state, mu):
    """Gravitational acceleration from both primaries, shape (..., 3)."""
    d1, d2, r1, r2 = _offsets(state, mu)
    return (-(1.0 - mu) * d1 / r1[..., None] ** 3
            - mu * d2 / r2[..., None] ** 3)


def vector_field(state, sigma, mu):
    """Right-hand side f(state, sigma) of the rotating-frame equations.

    Parameters
    ----------
    state : array, shape (..., 6)
    sigma : float
        Unfolding parameter; adds ``sigma*(vx, vy, vz)`` to the acceleration
        rows.  Zero gives the physical field.
    mu : float
        Mass ratio of the light primary.

    Returns
    -------
    array, shape (..., 6)
    """
    state = np.asarray(state, dtype=float)
    g = gravity(state, mu)
    out = np.empty_like(state)
    vel = state[..., 3:]
    out[..., :3] = vel
    out[..., 3] = 2.0 * vel[..., 1] + state[..., 0] + g[..., 0]
    out[..., 4] = -2.0 * vel[..., 0] + state[..., 1] + g[..., 1]
    out[..., 5] = g[..., 2]
    if sigma != 0.0:
        out[..., 3:] += sigma * vel
    return out


def gravity_gradient(state, mu):
    """d(gravity)/d(position), shape (..., 3, 3)."""
    d1, d2, r1, r2 = _offsets(state, mu)
    eye = np.eye(3)
    g = np.zeros(state.shape[:-1] + (3, 3))
    for d, r, m in ((d1, r1, 1.0 - mu), (d2, r2, mu)):
        r3 = r[..., None, None] ** 3
        r5 = r[..., None, None] ** 5
        g += m * (3.0 * d[..., :, None] * d[..., None, :] / r5 - eye / r3)
    return g


def jacobian(state, mu, sigma=0.0):
    """Jacobian of `vector_field` with respect to the state, (..., 6, 6)."""
    state = np.asarray(state, dtype=float)
    gg = gravity_gradient(state, mu)
    jac = np.zeros(state.shape[:-1] + (6, 6))
    jac[..., 0, 3] = 1.0
    jac[..., 1, 4] = 1.0
    jac[..., 2, 5] = 1.0
    jac[..., 3:, :3] = gg
    jac[..., 3, 0] += 1.0
    jac[..., 4, 1] += 1.0
    jac[..., 3, 4] = 2.0
    jac[..., 4, 3] = -2.0
    if sigma != 0.0:
        jac[..., 3, 3] += sigma
        jac[..., 4, 4] += sigma
        jac[..., 5, 5] += sigma
    return jac


def jacobian_action_gradient(state, w, mu):
    """Derivative of ``jacobian(state, mu, 0) @ w`` with respect to the state.

    Needed when an eigenfunction equation rides along a varying base orbit:
    the linearization of ``f_u(u, 0) v`` in ``u`` involves second derivatives
    of the field, which are nonzero only in the gravity block.

    Parameters
    ----------
    state : array (..., 6)
    w : array (..., 6)
        Vector the Jacobian acts on (only its position part enters).

    Returns
    -------
    array (..., 6, 6) equal to d/du [f_u(u,0) w].
    """
    state = np.asarray(state, dtype=float)
    w = np.asarray(w, dtype=float)
    d1, d2, r1, r2 = _offsets(state, mu)
    wpos = w[..., :3]
    eye = np.eye(3)
    block = np.zeros(state.shape[:-1] + (3, 3))
    for d, r, m in ((d1, r1, 1.0 - mu), (d2, r2, mu)):
        r5 = r[..., None, None] ** 5
        r7 = r[..., None, None] ** 7
        dw = np.sum(d * wpos, axis=-1)[..., None, None]
        outer_dw = d[..., :, None] * wpos[..., None, :]
        outer_wd = wpos[..., :, None] * d[..., None, :]
        outer_dd = d[..., :, None] * d[..., None, :]
        block += m * (3.0 * (dw * eye + outer_dw + outer_wd) / r5
                      - 15.0 * dw * outer_dd / r7)
    out = np.zeros(state.shape[:-1] + (6, 6))
    out[..., 3:, :3] = block
    return out


def effective_potential(pos, mu):
    """U(x, y, z): rotating-frame effective potential (paperless convention:
    includes the constant -mu(1-mu)/2 so E matches the usual tabulations)."""
    pos = np.asarray(pos, dtype=float)
    state = np.concatenate([pos, np.zeros_like(pos)], axis=-1)
    _, _, r1, r2 = _offsets(state, mu)
    x, y = pos[..., 0], pos[..., 1]
    return (-(x * x + y * y) / 2.0 - (1.0 - mu) / r1 - mu / r2
            - mu * (1.0 - mu) / 2.0)


def energy(state, mu):
    """Conserved energy E = |v|^2/2 + U(x,y,z)."""
    state = np.asarray(state, dtype=float)
    vel = state[..., 3:]
    return 0.5 * np.sum(vel * vel, axis=-1) + effective_potential(state[..., :3], mu)


def jacobi_constant(state, mu):
    """Jacobi constant C = -2E."""
    return -2.0 * energy(state, mu)


def energy_gradient(state, mu):
    """Gradient of E with respect to the full state, shape (..., 6)."""
    state = np.asarray(state, dtype=float)
    g = gravity(state, mu)
    out = np.empty_like(state)
    # dU/dpos = -(gravity + centrifugal)
    out[..., 0] = -(g[..., 0] + state[..., 0])
    out[..., 1] = -(g[..., 1] + state[..., 1])
    out[..., 2] = -g[..., 2]
    out[..., 3:] = state[..., 3:]
    return out


def collinear_equation(x, mu):
    """On-axis force balance whose roots are the collinear points L1-L3."""
    x = np.asarray(x, dtype=float)
    d1 = x + mu
    d2 = x - 1.0 + mu
    return x - (1.0 - mu) * d1 / np.abs(d1) ** 3 - mu * d2 / np.abs(d2) ** 3


def _collinear_equation_prime(x, mu):
    d1 = x + mu
    d2 = x - 1.0 + mu
    return 1.0 + 2.0 * (1.0 - mu) / np.abs(d1) ** 3 + 2.0 * mu / np.abs(d2) ** 3


@dataclass(frozen=True)
class LibrationPoint:
    """An equilibrium of the rotating-frame field with its linear data."""

    index: int
    state: np.ndarray = field(repr=False)
    eigenvalues: np.ndarray = field(repr=False)

    @property
    def position(self):
        return self.state[:3]

    @property
    def x(self):
        return float(self.state[0])

    def __post_init__(self):
        object.__setattr__(self, "state", np.asarray(self.state, dtype=float))
        object.__setattr__(self, "eigenvalues",
                           np.asarray(self.eigenvalues, dtype=complex))


def oscillatory_pair(point, mu, which):
    """Pick an imaginary eigenvalue pair of a libration point's linearization.

    Parameters
    ----------
    point : LibrationPoint
    which : {'planar', 'vertical'}
        'vertical' selects the pure (z, vz) oscillation; 'planar' the in-plane
        center pair.

    Returns
    -------
    (omega, eigvec) : positive frequency and the complex eigenvector of
    +i*omega, normalized to unit norm.

    Raises
    ------
    NotOscillatory if no such pair exists (e.g. 'planar' at an equilateral
    point beyond the Routh ratio, where the pairs are not cleanly split).
    """
    jac = jacobian(point.state, mu)
    vals, vecs = np.linalg.eig(jac)
    imag_mask = (np.abs(vals.real) < 1e-9) & (vals.imag > 1e-9)
    candidates = []
    for idx in np.nonzero(imag_mask)[0]:
        vec = vecs[:, idx]
        z_weight = np.sum(np.abs(vec[[2, 5]]) ** 2)
        candidates.append((float(vals[idx].imag), vec, z_weight))
    if not candidates:
        raise NotOscillatory(f"L{point.index}: no purely imaginary pair")
    vertical = max(candidates, key=lambda c: c[2])
    if which == "vertical":
        omega, vec, zw = vertical
        if zw < 0.9:
            raise NotOscillatory(f"L{point.index}: no pure vertical pair")
    elif which == "planar":
        planar = [c for c in candidates if c is not vertical]
        if not planar:
            raise NotOscillatory(f"L{point.index}: no planar pair")
        omega, vec, _ = min(planar, key=lambda c: c[2])
    else:
        raise ValueError(f"unknown pair selector {which!r}")
    vec = vec / np.linalg.norm(vec)
    return omega, vec


def libration_points(mu):
    """All five equilibria for mass ratio mu, with eigenvalues attached.

    L1 lies between the primaries, L2 beyond the light one, L3 beyond the
    heavy one; L4/L5 are the equilateral points (exact closed form).
    Collinear roots are found by bracketed root solving plus a Newton polish
    to drive |f| below 1e-13.
    """
    from scipy.optimize import brentq

    if not 0.0 < mu < 0.5:
        raise ValueError("mass ratio must lie in (0, 0.5)")
    gap = 1e-7
    brackets = {
        1: (-mu + gap, 1.0 - mu - gap),
        2: (1.0 - mu + gap, 2.0),
        3: (-2.0, -mu - gap),
    }
    points = []
    for index in (1, 2, 3):
        a, b = brackets[index]
        try:
            x = brentq(collinear_equation, a, b, args=(mu,),
                       xtol=1e-14, rtol=8.9e-16)
        except ValueError as exc:
            raise ConvergenceError(f"collinear root L{index} failed: {exc}") from exc
        for _ in range(4):  # Newton polish; brentq already leaves |f| tiny
            r = collinear_equation(x, mu)
            x -= r / _collinear_equation_prime(x, mu)
        if abs(collinear_equation(x, mu)) > 1e-12:
            raise ConvergenceError(f"collinear root L{index} did not polish")
        state = np.array([x, 0.0, 0.0, 0.0, 0.0, 0.0])
        vals = np.linalg.eigvals(jacobian(state, mu))
        points.append(LibrationPoint(index, state, _sort_eigs(vals)))
    for index, sy in ((4, 1.0), (5, -1.0)):
        state = np.array([0.5 - mu, sy * np.sqrt(3.0) / 2.0, 0.0, 0.0, 0.0, 0.0])
        vals = np.linalg.eigvals(jacobian(state, mu))
        points.append(LibrationPoint(index, state, _sort_eigs(vals)))
    return points


def _sort_eigs(vals):
    return np.array(sorted(vals, key=lambda v: (round(v.real, 12), v.imag)))


def collinear_sweep(mu_values):
    """x-coordinates of L1..L3 over a range of mass ratios (diagram helper)."""
    rows = []
    for mu in np.asarray(mu_values, dtype=float):
        pts = libration_points(mu)
        rows.append([mu] + [p.x for p in pts[:3]])
    return np.array(rows)
