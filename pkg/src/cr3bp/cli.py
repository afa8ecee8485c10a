"""Command-line driver for the toolkit's pipelines.

Each subcommand reads an optional JSON config file, applies flag overrides,
runs one stage (libration points, a family, an eigenfunction packet, manifold
growth or sweep, connection continuation, classification, plotting), and
writes its outputs under the run's output directory: .sol solution files,
schema-tagged CSVs, and SVG figures.

Exit codes: 0 success, 1 numerical failure (the event report goes to
stderr), 2 configuration error, 3 I/O error.  Runs are deterministic in
single-threaded mode; --jobs only fans out independent configs.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import dynamics as dyn
from .collocation import MeshedSolution
from .connections import (CoupledConnection, assemble_coupled,
                          classify_connection, continue_connection,
                          refine_connection_to_energy)
from .errors import (BranchSwitchFailure, CollisionError, ConfigError,
                     InconsistentParts, InsufficientWindings, NoConvergence,
                     NonPositiveExponent, NotSimpleEigenvalue,
                     SchemaMismatch, SectionNotReached)
from .floquet import EigenPacket, grow_eigenfunction
from .io import (RunConfig, load_config, load_solution, read_records_csv,
                 save_solution, write_records_csv)
from .manifold import (FundamentalDomain, ManifoldOrbit, Section,
                       fundamental_domain, grow_orbit, sweep_manifold)
from .orbits import (compute_family, continue_to_energy, equilibrium_frame,
                     periodic_problem)
from . import plotting

_NUMERICAL = (NoConvergence, SectionNotReached, BranchSwitchFailure,
              InsufficientWindings, InconsistentParts, NonPositiveExponent,
              NotSimpleEigenvalue, CollisionError)

FAMILY_CSV = "cr3bp-family-csv/1"
SWEEP_CSV = "cr3bp-sweep-csv/1"
CONNECTION_CSV = "cr3bp-connection-csv/1"
CLASSIFY_CSV = "cr3bp-classify-csv/1"
LIBRATION_CSV = "cr3bp-libration-csv/1"


def _config_from(args):
    overrides = {}
    for key in ("mu", "point", "pair", "n_intervals", "degree", "max_steps",
                "store_every", "eps", "rho", "t_r_cap", "out_dir",
                "stop_energy"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    if getattr(args, "section", None) is not None:
        overrides["section"] = _parse_section_flag(args.section)
    if args.config:
        return load_config(args.config, overrides)
    return RunConfig.from_dict(overrides)


def _parse_section_flag(text):
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"section flag {text!r}; expected index:value:crossing")
    try:
        return {"index": int(parts[0]), "value": float(parts[1]),
                "crossing": int(parts[2])}
    except ValueError:
        raise ConfigError(f"section flag {text!r} has non-numeric fields") from None


def _section_of(cfg):
    if cfg.section is None:
        raise ConfigError("this command needs a section (index:value:crossing)")
    return Section(int(cfg.section["index"]), float(cfg.section["value"]),
                   int(cfg.section.get("crossing", 1)))


def _outpath(cfg, name):
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, name)


def _provenance(args, **extra):
    p = {"command": args.command}
    p.update(extra)
    return p


def cmd_libration(args):
    cfg = _config_from(args)
    points = dyn.libration_points(cfg.mu)
    rows = []
    for p in points:
        row = {"name": f"L{p.index}", "x": p.state[0], "y": p.state[1],
               "z": p.state[2]}
        for i, ev in enumerate(sorted(p.eigenvalues,
                                      key=lambda e: (e.real, e.imag))):
            row[f"ev{i}_re"] = ev.real
            row[f"ev{i}_im"] = ev.imag
        rows.append(row)
        res = np.linalg.norm(dyn.vector_field(p.state, 0.0, cfg.mu))
        print(f"L{p.index}: x={p.state[0]: .12f}  |f|={res:.2e}")
    cols = list(rows[0].keys())
    path = write_records_csv(_outpath(cfg, "libration.csv"),
                             LIBRATION_CSV, cols, rows)
    print(f"wrote {path}")
    return 0


def cmd_family(args):
    cfg = _config_from(args)
    problem = periodic_problem(cfg.mu)
    points = {f"L{p.index}": p for p in dyn.libration_points(cfg.mu)}
    frame = equilibrium_frame(problem, points[cfg.point], cfg.pair, cfg.mu,
                              n_intervals=cfg.n_intervals, degree=cfg.degree,
                              ds0=cfg.ds0)
    stop_at = None
    if cfg.stop_energy is not None:
        stop_at = ("E", cfg.stop_energy, 1e-10)
    result = compute_family(problem, frame, cfg.mu,
                            family=f"{cfg.point}-{cfg.pair}",
                            controls=cfg.controls(), stop_at=stop_at)
    cols = ["step", "E", "T", "sigma", "lambda_u", "angle",
            "pairing_defect", "trivial_defect", "ill_conditioned"]
    rows = [{c: r.get(c) for c in cols} for r in result.records]
    write_records_csv(_outpath(cfg, "family.csv"), FAMILY_CSV, cols, rows)
    eventrows = [{"kind": e.kind,
                  "E": float(dyn.energy(e.location.values[0], cfg.mu)),
                  "T": e.location.scalars["T"]} for e in result.events]
    write_records_csv(_outpath(cfg, "events.csv"), FAMILY_CSV,
                      ["kind", "E", "T"], eventrows)
    for i, orbit in enumerate(result.orbits):
        save_solution(_outpath(cfg, f"orbit-{i:04d}.sol"), orbit.solution,
                      kind="periodic-orbit", mu=cfg.mu,
                      provenance=_provenance(args, step=i,
                                             family=orbit.family))
    print(f"{len(result.records)} steps, {len(result.events)} events, "
          f"stopped: {result.reason}")
    return 0


def cmd_eigenfunction(args):
    cfg = _config_from(args)
    sf = load_solution(args.orbit)
    packet = grow_eigenfunction(sf.solution, cfg.mu, rho_target=float(cfg.rho))
    out = _outpath(cfg, "packet.sol")
    save_solution(out, packet.extended, kind="eigenfunction-packet",
                  mu=cfg.mu, provenance=_provenance(args, orbit=args.orbit))
    print(f"lambda={packet.lam:.10f} rho={packet.rho:g} "
          f"sigma={packet.extended.scalars['sigma']:.2e}")
    print(f"wrote {out}")
    return 0


def _load_packet(path, mu):
    sf = load_solution(path)
    if sf.kind != "eigenfunction-packet":
        raise ConfigError(f"{path} holds {sf.kind!r}, expected a packet")
    return EigenPacket(sf.solution, mu)


def cmd_manifold_grow(args):
    cfg = _config_from(args)
    if cfg.eps is None:
        raise ConfigError("manifold-grow needs --eps")
    section = _section_of(cfg)
    packet = _load_packet(args.packet, cfg.mu)
    base = MeshedSolution(packet.extended.mesh,
                          packet.extended.values[:, :6].copy(),
                          {"T": packet.T, "sigma": 0.0})
    mo = grow_orbit(base, packet, cfg.eps, section, cfg.mu,
                    n_intervals=cfg.n_intervals, degree=cfg.degree,
                    t_r_cap=cfg.t_r_cap,
                    controls=cfg.controls(max_steps=max(cfg.max_steps, 400)))
    out = _outpath(cfg, "morbit.sol")
    save_solution(out, mo.r, kind="manifold-orbit", mu=cfg.mu,
                  provenance=_provenance(args, packet=args.packet),
                  extras={"base_u0": mo.base_u0, "base_v0": mo.base_v0,
                          "section": [section.index, section.value,
                                      section.crossing]})
    print(f"T_r={mo.T_r:.6f} eps={mo.eps:.6e} start_defect={mo.start_defect():.2e}")
    print(f"wrote {out}")
    return 0


def _load_morbit(path, mu, packet_path=None):
    sf = load_solution(path)
    if sf.kind != "manifold-orbit":
        raise ConfigError(f"{path} holds {sf.kind!r}, expected a manifold orbit")
    idx, val, crossing = sf.extras["section"]
    packet = _load_packet(packet_path, mu) if packet_path else None
    base_orbit = None
    if packet is not None:
        base_orbit = MeshedSolution(packet.extended.mesh,
                                    packet.extended.values[:, :6].copy(),
                                    {"T": packet.T, "sigma": 0.0})
    return ManifoldOrbit(sf.solution, Section(int(idx), val, int(crossing)),
                         np.array(sf.extras["base_u0"]),
                         np.array(sf.extras["base_v0"]),
                         base_orbit, packet)


def cmd_manifold_sweep(args):
    cfg = _config_from(args)
    mo = _load_morbit(args.morbit, cfg.mu)
    if args.eps_to is not None:
        domain = FundamentalDomain(mo.eps, float(args.eps_to))
    else:
        lam = float(args.lam) if args.lam is not None else None
        if lam is None:
            raise ConfigError("manifold-sweep needs --eps-to or --lam")
        domain = fundamental_domain(mo.eps, lam)
    sweep = sweep_manifold(mo, domain, cfg.mu, t_r_cap=cfg.t_r_cap,
                           store_every=cfg.store_every,
                           controls=cfg.controls(max_steps=max(cfg.max_steps, 600)))
    cols = ["step", "eps", "T_r", "ds", "iterations"]
    rows = [{c: r.get(c) for c in cols} for r in sweep.records]
    write_records_csv(_outpath(cfg, "sweep.csv"), SWEEP_CSV, cols, rows)
    final = sweep.orbits[-1]
    save_solution(_outpath(cfg, "morbit-final.sol"), final.r,
                  kind="manifold-orbit", mu=cfg.mu,
                  provenance=_provenance(args, source=args.morbit,
                                         termination=sweep.termination),
                  extras={"base_u0": final.base_u0, "base_v0": final.base_v0,
                          "section": [final.section.index,
                                      final.section.value,
                                      final.section.crossing]})
    print(f"termination={sweep.termination} steps={len(sweep.records)} "
          f"eps={final.eps:.9e} T_r={final.T_r:.4f}")
    if sweep.termination not in ("domain_complete", "obstacle"):
        print(f"sweep halted: {sweep.termination}", file=sys.stderr)
        return 1
    return 0


def cmd_connect(args):
    cfg = _config_from(args)
    base = load_solution(args.orbit).solution
    packet = _load_packet(args.packet, cfg.mu)
    mo = _load_morbit(args.morbit, cfg.mu, args.packet)
    conn = assemble_coupled(base, packet, mo)
    print(f"assembled: E={conn.energy:.6f} T={conn.T:.6f} "
          f"lam={conn.lam:.6f} eps={conn.eps:.6e} sigma={conn.sigma:.2e}")
    if args.to_energy is not None:
        conn = refine_connection_to_energy(conn, float(args.to_energy))
        _write_connection(cfg, args, conn, suffix="")
        print(f"refined to E={conn.energy:.6f}")
        return 0
    fam = continue_connection(conn, orient=args.orient,
                              controls=cfg.controls(max_steps=cfg.max_steps))
    cols = ["step", "E", "T", "sigma", "lam", "eps", "T_r"]
    rows = [{c: r.get(c) for c in cols} for r in fam.records]
    write_records_csv(_outpath(cfg, "connection.csv"), CONNECTION_CSV,
                      cols, rows)
    for i, c in enumerate(fam.connections):
        _write_connection(cfg, args, c, suffix=f"-{i:04d}")
    print(f"{len(fam.records)} steps, stopped: {fam.reason}"
          + (" (closed loop)" if fam.closed else ""))
    return 0


def _write_connection(cfg, args, conn, suffix):
    save_solution(_outpath(cfg, f"connection{suffix}.sol"), conn.solution,
                  kind="coupled-connection", mu=cfg.mu,
                  provenance=_provenance(args),
                  extras={"section": [conn.section.index, conn.section.value,
                                      conn.section.crossing],
                          "sign": conn.sign})


def _load_connection(path, mu):
    sf = load_solution(path)
    if sf.kind != "coupled-connection":
        raise ConfigError(f"{path} holds {sf.kind!r}, expected a connection")
    idx, val, crossing = sf.extras["section"]
    return CoupledConnection(sf.solution, mu,
                             Section(int(idx), val, int(crossing)),
                             sign=int(sf.extras.get("sign", 1)))


def cmd_classify(args):
    cfg = _config_from(args)
    conn = _load_connection(args.connection, cfg.mu)
    record = classify_connection(conn)
    row = {"E": record.energy, "lam": record.lam, "eps": record.eps,
           "T": record.T, "T_r": record.T_r,
           "hints": ";".join(record.hints),
           "windings": record.monitors.get("windings"),
           "rotation_number": record.monitors.get("rotation_number"),
           "torus_rms": record.monitors.get("torus_rms")}
    write_records_csv(_outpath(cfg, "classification.csv"), CLASSIFY_CSV,
                      list(row.keys()), [row])
    print(f"E={record.energy:.6f} hints: {';'.join(record.hints) or '(none)'}")
    return 0


def cmd_plot(args):
    cfg = _config_from(args)
    out = args.out_file or _outpath(cfg, "figure.svg")
    kind = args.kind
    if kind == "orbit":
        sf = load_solution(args.inputs[0])
        sol = sf.solution
        if sf.kind == "coupled-connection":
            sol = _load_connection(args.inputs[0], cfg.mu).r_part()
        plotting.plot_orbit(sol, out)
    elif kind == "family":
        sols = [load_solution(p).solution for p in args.inputs]
        plotting.plot_family(sols, out)
    elif kind == "manifold":
        mos = [_load_morbit(p, cfg.mu) for p in args.inputs]
        plotting.plot_manifold(mos, out)
    elif kind == "curve":
        _, rows = read_records_csv(args.inputs[0])
        plotting.plot_curve(rows, out, x=args.x, y=args.y,
                            logy=bool(args.logy))
    else:
        raise ConfigError(f"unknown plot kind {kind!r}")
    print(f"wrote {out}")
    return 0


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--mu", type=float)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--n-intervals", dest="n_intervals", type=int)
    p.add_argument("--degree", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--store-every", dest="store_every", type=int)


def build_parser():
    ap = argparse.ArgumentParser(
        prog="cr3bp", description="periodic-orbit family, manifold, and "
        "connection pipelines for the circular restricted three-body problem")
    ap.add_argument("--jobs", type=int, default=1,
                    help="process count for fanning out independent configs")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("libration", help="equilibria and their eigenvalues")
    _add_common(p)
    p.set_defaults(func=cmd_libration)

    p = sub.add_parser("family", help="continue a periodic-orbit family")
    _add_common(p)
    p.add_argument("--point", choices=["L1", "L2", "L3", "L4", "L5"])
    p.add_argument("--pair", choices=["planar", "vertical"])
    p.add_argument("--stop-energy", dest="stop_energy", type=float)
    p.set_defaults(func=cmd_family)

    p = sub.add_parser("eigenfunction", help="grow a Floquet packet")
    _add_common(p)
    p.add_argument("--orbit", required=True, help=".sol of the base orbit")
    p.add_argument("--rho", type=int)
    p.set_defaults(func=cmd_eigenfunction)

    p = sub.add_parser("manifold-grow", help="grow one manifold orbit")
    _add_common(p)
    p.add_argument("--packet", required=True)
    p.add_argument("--eps", type=float)
    p.add_argument("--section", help="index:value:crossing")
    p.add_argument("--t-r-cap", dest="t_r_cap", type=float)
    p.set_defaults(func=cmd_manifold_grow)

    p = sub.add_parser("manifold-sweep", help="sweep the manifold in eps")
    _add_common(p)
    p.add_argument("--morbit", required=True)
    p.add_argument("--eps-to", dest="eps_to", type=float)
    p.add_argument("--lam", type=float,
                   help="exponent for one fundamental domain")
    p.add_argument("--t-r-cap", dest="t_r_cap", type=float)
    p.set_defaults(func=cmd_manifold_sweep)

    p = sub.add_parser("connect", help="assemble and continue a connection")
    _add_common(p)
    p.add_argument("--orbit", required=True)
    p.add_argument("--packet", required=True)
    p.add_argument("--morbit", required=True)
    p.add_argument("--orient", type=int, default=1, choices=[1, -1])
    p.add_argument("--to-energy", dest="to_energy", type=float)
    p.set_defaults(func=cmd_connect)

    p = sub.add_parser("classify", help="hint classification of a connection")
    _add_common(p)
    p.add_argument("--connection", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("plot", help="render an SVG from saved outputs")
    _add_common(p)
    p.add_argument("--kind", required=True,
                   choices=["orbit", "family", "manifold", "curve"])
    p.add_argument("--out-file", dest="out_file")
    p.add_argument("--x", default="step")
    p.add_argument("--y", default="E")
    p.add_argument("--logy", action="store_true")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_plot)
    return ap


def _run_one(argv):
    args = build_parser().parse_args(argv)
    return args.func(args)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.jobs > 1 and getattr(args, "config", None):
            return _fanout(argv, args)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SchemaMismatch as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except _NUMERICAL as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1


def _fanout(argv, args):
    """Run the same command once per comma-separated config, in parallel."""
    paths = args.config.split(",")
    if len(paths) == 1:
        return args.func(args)
    i = argv.index("--config")
    variants = []
    for p in paths:
        v = list(argv)
        v[i + 1] = p
        variants.append(v)
    codes = []
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        for code in pool.map(_run_one, variants):
            codes.append(code)
    return max(codes)


if __name__ == "__main__":
    sys.exit(main())
