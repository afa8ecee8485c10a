"""Solution persistence, CSV export, and run configuration.

Solution files (.sol) are a text/binary hybrid: a single JSON header line
(UTF-8, sorted keys, terminated by a newline) followed by a raw binary body.
The body is the mesh point array then the nodal value array, both float64
little-endian in C order; the header records the shapes and a SHA-256 digest
of the body bytes.  JSON float serialization round-trips the shortest repr,
so load -> save reproduces the file bit for bit.  All writes go through a
temporary file in the destination directory and os.replace, so readers never
observe a partial file.

CSV exports carry their schema identifier in a leading comment line; columns
for each schema are documented in docs/output-formats.md.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import os
import tempfile
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .collocation import Mesh, MeshedSolution
from .continuation import Controls
from .errors import ConfigError, SchemaMismatch

SOLUTION_SCHEMA = "cr3bp-solution/1"
CONFIG_SCHEMA = "cr3bp-config/1"


def _atomic_write(path, data):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class SolutionFile:
    """A loaded .sol file: the solution plus its header metadata."""

    solution: MeshedSolution
    kind: str
    mu: float
    provenance: dict
    extras: dict
    schema: str = SOLUTION_SCHEMA


def save_solution(path, sol, *, kind, mu, provenance=None, extras=None):
    """Write a MeshedSolution to path in the .sol format."""
    points = np.ascontiguousarray(sol.mesh.points, dtype="<f8")
    values = np.ascontiguousarray(sol.values, dtype="<f8")
    body = points.tobytes() + values.tobytes()
    header = {
        "schema": SOLUTION_SCHEMA,
        "kind": kind,
        "mu": float(mu),
        "scalars": {k: float(v) for k, v in sol.scalars.items()},
        "mesh": {"degree": int(sol.mesh.degree),
                 "n_points": int(points.shape[0])},
        "values_shape": [int(n) for n in values.shape],
        "provenance": dict(provenance or {}),
        "extras": _jsonify(extras or {}),
        "body_sha256": hashlib.sha256(body).hexdigest(),
        "body_len": len(body),
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":"))
    _atomic_write(path, line.encode("utf-8") + b"\n" + body)
    return path


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def load_solution(path):
    """Read a .sol file; verifies schema version and body digest."""
    with open(path, "rb") as fh:
        line = fh.readline()
        body = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaMismatch(f"{path}: unreadable header ({exc})") from None
    schema = header.get("schema")
    if schema != SOLUTION_SCHEMA:
        raise SchemaMismatch(
            f"{path}: schema {schema!r}, this build reads {SOLUTION_SCHEMA!r}")
    if len(body) != header["body_len"]:
        raise SchemaMismatch(f"{path}: body is {len(body)} bytes, "
                             f"header promises {header['body_len']}")
    digest = hashlib.sha256(body).hexdigest()
    if digest != header["body_sha256"]:
        raise SchemaMismatch(f"{path}: body digest mismatch")
    n_pts = header["mesh"]["n_points"]
    shape = tuple(header["values_shape"])
    points = np.frombuffer(body, dtype="<f8", count=n_pts)
    values = np.frombuffer(body, dtype="<f8", offset=8 * n_pts)
    values = values.reshape(shape).copy()
    mesh = Mesh(points.copy(), header["mesh"]["degree"])
    sol = MeshedSolution(mesh, values, dict(header["scalars"]))
    return SolutionFile(sol, header["kind"], header["mu"],
                        header.get("provenance", {}),
                        header.get("extras", {}))


def write_records_csv(path, schema_id, columns, records):
    """One row per record dict; floats keep full repr precision."""
    buf = _io.StringIO()
    buf.write(f"# schema: {schema_id}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for rec in records:
        writer.writerow([_cell(rec.get(c)) for c in columns])
    _atomic_write(path, buf.getvalue().encode("utf-8"))
    return path


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def read_records_csv(path):
    """Returns (schema_id, rows) with cells parsed back to float/int/str."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("# schema: "):
            raise SchemaMismatch(f"{path}: missing schema comment line")
        schema_id = first[len("# schema: "):].strip()
        reader = csv.reader(fh)
        columns = next(reader)
        rows = [{c: _parse_cell(v) for c, v in zip(columns, row)}
                for row in reader]
    return schema_id, rows


def _parse_cell(v):
    if v == "":
        return None
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


#: documented inclusive bounds for RunConfig numeric fields
_BOUNDS = {
    "mu": (0.0, 0.5),
    "n_intervals": (4, 2000),
    "degree": (2, 8),
    "tol": (0.0, 1e-2),
    "ds0": (0.0, 1.0),
    "ds_max": (0.0, 2.0),
    "max_steps": (1, 100000),
    "store_every": (1, 100000),
    "rho": (1, 64),
    "eps": (-1.0, 1.0),
    "t_r_cap": (0.0, 1e4),
}
#: fields that must additionally be strictly positive
_POSITIVE = {"mu", "tol", "ds0", "ds_max", "t_r_cap"}


@dataclass
class RunConfig:
    """Declarative run description; defaults match the baseline timing setup.

    Unknown keys and out-of-range values are rejected at load time so a typo
    in a config file fails loudly instead of silently running the defaults.
    """

    mu: float = 0.01215
    point: str = "L1"
    pair: str = "vertical"
    n_intervals: int = 20
    degree: int = 4
    tol: float = 1e-8
    error_cap: float = None
    ds0: float = 0.01
    ds_max: float = 0.065
    max_steps: int = 48
    store_every: int = 1
    rho: int = 1
    eps: float = None
    section: dict = None
    stop_energy: float = None
    t_r_cap: float = 50.0
    out_dir: str = "out"

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in dc_fields(cls)}
        unknown = sorted(set(raw) - known - {"schema"})
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        schema = raw.get("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ConfigError(f"config schema {schema!r}, this build reads "
                              f"{CONFIG_SCHEMA!r}")
        cfg = cls(**{k: v for k, v in raw.items() if k != "schema"})
        cfg.validate()
        return cfg

    def validate(self):
        for name, (lo, hi) in _BOUNDS.items():
            v = getattr(self, name)
            if v is None:
                continue
            bad = not np.isfinite(v) or v < lo or v > hi
            if bad or (name in _POSITIVE and v <= 0.0):
                raise ConfigError(
                    f"config field {name}={v!r} outside [{lo}, {hi}]")
        if self.point not in ("L1", "L2", "L3", "L4", "L5"):
            raise ConfigError(f"unknown libration point {self.point!r}")
        if self.pair not in ("planar", "vertical"):
            raise ConfigError(f"unknown oscillatory pair {self.pair!r}")
        if self.eps is not None and self.eps == 0.0:
            raise ConfigError("eps must be nonzero")
        if self.section is not None:
            extra = sorted(set(self.section) - {"index", "value", "crossing"})
            if extra:
                raise ConfigError(f"unknown section keys: {', '.join(extra)}")
            idx = self.section.get("index")
            if idx not in (0, 1, 2, 3, 4, 5):
                raise ConfigError(f"section index {idx!r} not a state index")
            if int(self.section.get("crossing", 1)) < 1:
                raise ConfigError("section crossing counts from 1")
        return self

    def controls(self, **overrides):
        c = Controls(max_steps=self.max_steps, tol=self.tol,
                     ds_max=self.ds_max, error_cap=self.error_cap,
                     store_every=self.store_every)
        for k, v in overrides.items():
            setattr(c, k, v)
        return c


def load_config(path, overrides=None):
    """Read a JSON config file and apply CLI overrides on top."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    raw.update(overrides or {})
    return RunConfig.from_dict(raw)
