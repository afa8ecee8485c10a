"""Static SVG projections of orbits, families, and diagnostic curves.

Every function here is a pure renderer: data in, one SVG file out, no global
pyplot state.  Output is deterministic for fixed input (fixed hash salt, no
timestamp metadata), so repeated runs are byte-identical and plots can be
diffed in version control.

Orbits are colored by scaled time with a fixed ramp running from deep sky
blue (0, 0.5, 1) through gray (0.5, 0.5, 0.5) to dark orange (1, 0.5, 0),
which makes direction of travel readable without arrows.
"""

from __future__ import annotations

import matplotlib as mpl
import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.collections import LineCollection
from matplotlib.figure import Figure

_RC = {"svg.hashsalt": "cr3bp", "svg.fonttype": "none",
       "font.size": 9.0, "axes.linewidth": 0.8}

RAMP_ANCHORS = np.array([[0.0, 0.5, 1.0],
                         [0.5, 0.5, 0.5],
                         [1.0, 0.5, 0.0]])


def time_ramp(n):
    """(n, 3) RGB rows along the blue -> gray -> orange ramp."""
    s = np.linspace(0.0, 1.0, n)
    out = np.empty((n, 3))
    lo = np.clip(2.0 * s, 0.0, 1.0)
    hi = np.clip(2.0 * s - 1.0, 0.0, 1.0)
    first = RAMP_ANCHORS[0] + lo[:, None] * (RAMP_ANCHORS[1] - RAMP_ANCHORS[0])
    second = RAMP_ANCHORS[1] + hi[:, None] * (RAMP_ANCHORS[2] - RAMP_ANCHORS[1])
    out[:] = np.where(s[:, None] <= 0.5, first, second)
    return out


def _new_axes(size, third_dim=False):
    fig = Figure(figsize=size, constrained_layout=True)
    FigureCanvasSVG(fig)
    if third_dim:
        ax = fig.add_subplot(projection="3d")
        ax.set_zlabel("z")
    else:
        ax = fig.add_subplot()
        ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    return fig, ax


def _save(fig, path):
    with mpl.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def _ramp_segments(ax, xyz, lw):
    pts = xyz[:, None, :]
    segs = np.concatenate([pts[:-1], pts[1:]], axis=1)
    colors = time_ramp(len(segs))
    if xyz.shape[1] == 3:
        from mpl_toolkits.mplot3d.art3d import Line3DCollection
        coll = Line3DCollection(segs, colors=colors, linewidths=lw)
    else:
        coll = LineCollection(segs, colors=colors, linewidths=lw)
    ax.add_collection(coll)


def plot_orbit(sol, path, *, n_samples=2000, size=(5.0, 4.0), view=None,
               base=None):
    """One trajectory in 3D, time-ramped; optionally a base orbit in black."""
    with mpl.rc_context(_RC):
        fig, ax = _new_axes(size, third_dim=True)
        xyz = sol.evaluate(np.linspace(0.0, 1.0, n_samples))[:, :3]
        _ramp_segments(ax, xyz, 1.0)
        if base is not None:
            b = base.evaluate(np.linspace(0.0, 1.0, 400))[:, :3]
            ax.plot(b[:, 0], b[:, 1], b[:, 2], color="black", lw=1.4)
        lo, hi = xyz.min(axis=0), xyz.max(axis=0)
        mid, span = 0.5 * (lo + hi), 0.55 * max(hi - lo)
        ax.set_xlim(mid[0] - span, mid[0] + span)
        ax.set_ylim(mid[1] - span, mid[1] + span)
        ax.set_zlim(mid[2] - span, mid[2] + span)
        if view is not None:
            ax.view_init(elev=view[0], azim=view[1])
        return _save(fig, path)


def plot_family(solutions, path, *, axes=(0, 2), n_samples=400,
                size=(5.0, 4.0), highlight=None, labels=("x", "z")):
    """Projected family portrait: one curve per member, ramped by index."""
    with mpl.rc_context(_RC):
        fig, ax = _new_axes(size)
        ax.set_xlabel(labels[0])
        ax.set_ylabel(labels[1])
        colors = time_ramp(max(len(solutions), 2))
        ts = np.linspace(0.0, 1.0, n_samples)
        for sol, color in zip(solutions, colors):
            Y = sol.evaluate(ts)
            ax.plot(Y[:, axes[0]], Y[:, axes[1]], color=color, lw=0.7)
        if highlight is not None:
            Y = highlight.evaluate(ts)
            ax.plot(Y[:, axes[0]], Y[:, axes[1]], color="black", lw=1.6)
        return _save(fig, path)


def plot_manifold(orbits, path, *, n_samples=500, size=(5.5, 4.5), view=None,
                  base=None, highlight=None):
    """Manifold orbit bundle in 3D; each orbit time-ramped along its run."""
    with mpl.rc_context(_RC):
        fig, ax = _new_axes(size, third_dim=True)
        ts = np.linspace(0.0, 1.0, n_samples)
        all_pts = []
        for mo in orbits:
            xyz = mo.r.evaluate(ts)[:, :3]
            _ramp_segments(ax, xyz, 0.5)
            all_pts.append(xyz)
        if highlight is not None:
            xyz = highlight.r.evaluate(np.linspace(0.0, 1.0, 4 * n_samples))[:, :3]
            _ramp_segments(ax, xyz, 1.3)
            all_pts.append(xyz)
        if base is not None:
            b = base.evaluate(ts)[:, :3]
            ax.plot(b[:, 0], b[:, 1], b[:, 2], color="black", lw=1.4)
            all_pts.append(b)
        P = np.vstack(all_pts)
        lo, hi = P.min(axis=0), P.max(axis=0)
        mid, span = 0.5 * (lo + hi), 0.55 * max(hi - lo)
        ax.set_xlim(mid[0] - span, mid[0] + span)
        ax.set_ylim(mid[1] - span, mid[1] + span)
        ax.set_zlim(mid[2] - span, mid[2] + span)
        if view is not None:
            ax.view_init(elev=view[0], azim=view[1])
        return _save(fig, path)


def plot_curve(records, path, *, x, y, size=(5.0, 3.6), marks=(),
               logy=False):
    """Scalar diagnostic curve from continuation records (e.g. E vs T)."""
    with mpl.rc_context(_RC):
        fig = Figure(figsize=size, constrained_layout=True)
        FigureCanvasSVG(fig)
        ax = fig.add_subplot()
        xs = np.array([r[x] for r in records], dtype=float)
        ys = np.array([r[y] for r in records], dtype=float)
        if logy:
            ys = np.abs(ys)
            ax.set_yscale("log")
        ax.plot(xs, ys, lw=1.0, color="tab:blue")
        for mx, my, label in marks:
            ax.plot([mx], [abs(my) if logy else my], "o", ms=4,
                    color="dark" "orange")
            ax.annotate(label, (mx, abs(my) if logy else my),
                        textcoords="offset points", xytext=(4, 4))
        ax.set_xlabel(x)
        ax.set_ylabel(y)
        return _save(fig, path)
