"""Command-line interface.

Subcommands::

    flatbundle analyze      --config job.ini [--out DIR]
    flatbundle sections     --config job.ini [--out DIR]
    flatbundle metric-check --config job.ini [--out DIR]
    flatbundle transport    --config job.ini [--out DIR]

Configs are INI files (see the README for the full format): a ``[chart]``
section fixes coordinates, box, and resolution; ``[connection]`` lists
Christoffel symbols ``Gamma[i][mu][j]`` or explicit coefficients
``omega[i][j][mu]`` as closed-form expressions; ``[analysis]`` and
``[transport]`` hold the base point, tolerances, and transport data.

Results go to stdout as JSON with sorted keys, so identical invocations
produce byte-identical output.  With ``--out DIR``, delimited CSV grids
and rendered figures are written next to a copy of the JSON report.

Exit codes: 0 success; 2 configuration or expression errors; 3 numerical
failures; 4 base point irregular (or no sections to construct).
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import configparser

import numpy as np

from .exprfield import ParseError, SingularEvaluationError, parse_scalar_field
from .bundle import (Chart, Connection, connection_from_christoffel,
                     induce_sym2)
from .flag import FlagError, derived_flag, is_regular
from .frobenius import (IntegrationError, MembershipError, adapted_frame,
                        integrate_parallel_frame, make_parallel_section,
                        parallel_transport, parallelism_residual)
from .metric import metric_check

__all__ = ["JobConfig", "ConfigError", "load_config", "main",
           "cmd_analyze", "cmd_sections", "cmd_metric_check", "cmd_transport"]

_IDENT = re.compile(r"^[A-Za-z_]\w*$")
_RESERVED = {"sin", "cos", "tan", "cot", "exp", "log", "sqrt"}
_GAMMA_KEY = re.compile(r"^Gamma\[(\w+)\]\[(\w+)\]\[(\w+)\]$")
_OMEGA_KEY = re.compile(r"^omega\[(\d+)\]\[(\d+)\]\[(\w+)\]$")


class ConfigError(ValueError):
    """Invalid job configuration."""


class JobConfig:
    """Validated job description built from an INI file."""

    def __init__(self, chart, bundle, gamma, omega, rank, base_point,
                 tol_rank, tol_stab, alpha_floor, residual_tol,
                 transport_path, transport_vector, transport_steps):
        self.chart = chart
        self.bundle = bundle
        self.gamma = gamma
        self.omega = omega
        self.rank = rank
        self.base_point = base_point
        self.tol_rank = tol_rank
        self.tol_stab = tol_stab
        self.alpha_floor = alpha_floor
        self.residual_tol = residual_tol
        self.transport_path = transport_path
        self.transport_vector = transport_vector
        self.transport_steps = transport_steps

    # -- connections

    def tangent_connection(self):
        if self.gamma is None:
            raise ConfigError("this command needs Christoffel symbols "
                              "(Gamma[...] entries) in [connection]")
        return connection_from_christoffel(self.gamma, self.chart)

    def analyzed_connection(self):
        """The connection the analyze/sections/transport commands act on."""
        if self.bundle == "explicit":
            return Connection(self.chart, self.rank, self.omega)
        conn = self.tangent_connection()
        if self.bundle == "sym2":
            return induce_sym2(conn)
        return conn


def _split_list(text):
    return [part.strip() for part in text.split(",")]


def _floats(text, what):
    out = []
    for part in _split_list(text):
        try:
            out.append(float(part))
        except ValueError:
            raise ConfigError(f"{what}: '{part}' is not a number")
    return out


def load_config(path, grid_override=None, tol_rank_override=None):
    """Read and validate a job INI file."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",),
                                       interpolation=None)
    parser.optionxform = str
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file '{path}'")

    if "chart" not in parser:
        raise ConfigError("missing [chart] section")
    chart_sec = parser["chart"]
    for key in chart_sec:
        if key not in ("coords", "domain", "grid"):
            raise ConfigError(f"[chart]: unknown key '{key}'")
    try:
        coords = tuple(_split_list(chart_sec["coords"]))
    except KeyError:
        raise ConfigError("[chart]: missing 'coords'")
    for c in coords:
        if not _IDENT.match(c):
            raise ConfigError(f"[chart]: invalid coordinate name '{c}'")
        if c in _RESERVED:
            raise ConfigError(f"[chart]: coordinate name '{c}' is a function name")
    if len(set(coords)) != len(coords):
        raise ConfigError("[chart]: duplicate coordinate names")
    m = len(coords)

    try:
        domain_parts = _split_list(chart_sec["domain"])
    except KeyError:
        raise ConfigError("[chart]: missing 'domain'")
    if len(domain_parts) != m:
        raise ConfigError(f"[chart]: domain needs {m} 'low : high' ranges")
    lows, highs = [], []
    for part in domain_parts:
        if ":" not in part:
            raise ConfigError(f"[chart]: range '{part}' must be 'low : high'")
        lo, hi = part.split(":", 1)
        lows.extend(_floats(lo, "[chart] domain"))
        highs.extend(_floats(hi, "[chart] domain"))
    try:
        grid_parts = _split_list(chart_sec["grid"])
    except KeyError:
        raise ConfigError("[chart]: missing 'grid'")
    if len(grid_parts) != m:
        raise ConfigError(f"[chart]: grid needs {m} resolutions")
    try:
        shape = tuple(int(p) for p in grid_parts)
    except ValueError:
        raise ConfigError("[chart]: grid entries must be integers")
    if grid_override is not None:
        shape = tuple(int(grid_override) for _ in shape)
    try:
        chart = Chart(coords, lows, highs, shape)
    except ValueError as exc:
        raise ConfigError(f"[chart]: {exc}")

    if "connection" not in parser:
        raise ConfigError("missing [connection] section")
    conn_sec = parser["connection"]
    gamma_entries, omega_entries = {}, {}
    bundle = None
    rank = None
    for key, value in conn_sec.items():
        if key == "bundle":
            bundle = value.strip()
            continue
        if key == "rank":
            try:
                rank = int(value)
            except ValueError:
                raise ConfigError("[connection]: rank must be an integer")
            continue
        gm = _GAMMA_KEY.match(key)
        if gm:
            names = gm.groups()
            for name in names:
                if name not in coords:
                    raise ConfigError(
                        f"[connection]: '{key}' uses unknown coordinate '{name}'")
            gamma_entries[tuple(coords.index(n) for n in names)] = value
            continue
        om = _OMEGA_KEY.match(key)
        if om:
            i, j, mu_name = om.groups()
            if mu_name not in coords:
                raise ConfigError(
                    f"[connection]: '{key}' uses unknown coordinate '{mu_name}'")
            omega_entries[(int(i), int(j), coords.index(mu_name))] = value
            continue
        raise ConfigError(f"[connection]: unknown key '{key}'")

    if gamma_entries and omega_entries:
        raise ConfigError("[connection]: cannot mix Gamma[...] and omega[...]")
    if bundle is None:
        bundle = "explicit" if omega_entries else "tangent"
    if bundle not in ("tangent", "sym2", "explicit"):
        raise ConfigError(f"[connection]: unknown bundle '{bundle}'")

    def parse_entry(key, text):
        try:
            return parse_scalar_field(text, coords)
        except ParseError as exc:
            raise ConfigError(f"[connection] {key}: {exc}")

    gamma = None
    omega = None
    if bundle in ("tangent", "sym2"):
        if omega_entries:
            raise ConfigError(
                f"[connection]: bundle '{bundle}' expects Gamma[...] entries")
        gamma = np.empty((m, m, m), dtype=object)
        zero = parse_scalar_field("0", coords)
        gamma[:] = zero
        for (i, mu, j), text in gamma_entries.items():
            gamma[i, mu, j] = parse_entry(
                f"Gamma[{coords[i]}][{coords[mu]}][{coords[j]}]", text)
        rank = m if bundle == "tangent" else m * (m + 1) // 2
    else:
        if gamma_entries:
            raise ConfigError("[connection]: bundle 'explicit' expects omega[...] entries")
        if rank is None:
            raise ConfigError("[connection]: bundle 'explicit' needs 'rank'")
        if rank < 1:
            raise ConfigError("[connection]: rank must be positive")
        omega = np.empty((rank, rank, m), dtype=object)
        zero = parse_scalar_field("0", coords)
        omega[:] = zero
        for (i, j, mu), text in omega_entries.items():
            if not (1 <= i <= rank and 1 <= j <= rank):
                raise ConfigError(
                    f"[connection]: omega[{i}][{j}][{coords[mu]}] outside rank {rank} "
                    "(fiber indices are 1-based)")
            omega[i - 1, j - 1, mu] = parse_entry(f"omega[{i}][{j}][{coords[mu]}]", text)

    analysis = parser["analysis"] if "analysis" in parser else {}
    for key in analysis:
        if key not in ("base_point", "tol_rank", "tol_stab", "alpha_floor",
                       "residual_tol"):
            raise ConfigError(f"[analysis]: unknown key '{key}'")

    def get_float(section, key, default):
        if key not in section:
            return default
        try:
            return float(section[key])
        except ValueError:
            raise ConfigError(f"[analysis]: '{key}' must be a number")

    if "base_point" in analysis:
        base_point = tuple(_floats(analysis["base_point"], "[analysis] base_point"))
        if len(base_point) != m:
            raise ConfigError(f"[analysis]: base_point needs {m} coordinates")
        if not chart.contains(base_point):
            raise ConfigError(f"[analysis]: base_point {base_point} outside the domain")
    else:
        base_point = chart.point_of(chart.center_index())

    tol_rank = get_float(analysis, "tol_rank", 1e-8)
    if tol_rank_override is not None:
        tol_rank = float(tol_rank_override)
    tol_stab = get_float(analysis, "tol_stab", 1e-6)
    alpha_floor = get_float(analysis, "alpha_floor", None)
    residual_tol = get_float(analysis, "residual_tol", 1e-5)
    if tol_rank <= 0 or tol_stab <= 0 or residual_tol <= 0:
        raise ConfigError("[analysis]: tolerances must be positive")

    transport_path = transport_vector = transport_steps = None
    if "transport" in parser:
        tr = parser["transport"]
        for key in tr:
            if key not in ("path", "vector", "steps"):
                raise ConfigError(f"[transport]: unknown key '{key}'")
        if "path" in tr:
            rows = [r for r in tr["path"].split(";") if r.strip()]
            if len(rows) < 2:
                raise ConfigError("[transport]: path needs at least two vertices")
            verts = []
            for row in rows:
                v = _floats(row, "[transport] path")
                if len(v) != m:
                    raise ConfigError(f"[transport]: vertex '{row.strip()}' needs "
                                      f"{m} coordinates")
                if not chart.contains(v):
                    raise ConfigError(f"[transport]: vertex {tuple(v)} outside the domain")
                verts.append(v)
            transport_path = np.array(verts)
        if "vector" in tr:
            transport_vector = np.array(_floats(tr["vector"], "[transport] vector"))
        if "steps" in tr:
            try:
                transport_steps = int(tr["steps"])
            except ValueError:
                raise ConfigError("[transport]: steps must be an integer")
            if transport_steps < 1:
                raise ConfigError("[transport]: steps must be positive")

    for name in parser.sections():
        if name not in ("chart", "connection", "analysis", "transport"):
            raise ConfigError(f"unknown section [{name}]")

    return JobConfig(chart, bundle, gamma, omega, rank, base_point,
                     tol_rank, tol_stab, alpha_floor, residual_tol,
                     transport_path, transport_vector, transport_steps)


# ---------------------------------------------------------------------------
# output helpers

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def _emit(payload, out_dir, name):
    text = json.dumps(_jsonable(payload), sort_keys=True, indent=2)
    print(text)
    if out_dir:
        with open(os.path.join(out_dir, name), "w") as fh:
            fh.write(text + "\n")


def _write_section_csv(path, chart, values):
    pts = chart.points().reshape(-1, chart.ndim)
    vals = values.reshape(-1, values.shape[-1])
    header = ",".join(chart.coords) + "," + ",".join(
        f"c{i + 1}" for i in range(values.shape[-1]))
    np.savetxt(path, np.hstack([pts, vals]), delimiter=",", fmt="%.17g",
               header=header, comments="# ")


def _flag_payload(report, base_index, base_regular):
    basis = report.field.bases[report.origin]
    return {
        "ranks": report.ranks,
        "rank_final": report.rank_final,
        "iterations": report.iterations,
        "base_index": list(base_index),
        "base_regular": base_regular,
        "alignment_index": list(report.origin),
        "regular_fraction": report.field.regular_fraction(),
        "irregular_count": int(np.count_nonzero(~report.field.mask)),
        "stable_basis_at_base": [list(col) for col in np.asarray(basis).T],
        "tolerances": report.tolerances,
        "caveat": report.caveat,
    }


# ---------------------------------------------------------------------------
# commands

def cmd_analyze(cfg, out_dir=None):
    """Run the derived flag and report the stable subbundle."""
    conn = cfg.analyzed_connection()
    base_index = cfg.chart.index_of(cfg.base_point)
    report = derived_flag(conn, tol_rank=cfg.tol_rank, tol_stab=cfg.tol_stab,
                          alpha_floor=cfg.alpha_floor, origin=base_index)
    base_regular = is_regular(report, base_index)
    payload = {"command": "analyze", "base_point": list(cfg.base_point)}
    payload.update(_flag_payload(report, base_index, base_regular))
    if out_dir:
        from . import plots
        fig = plots.figure_rank_map(report, os.path.join(out_dir, "rank_map.png"))
        if fig:
            payload["figures"] = [os.path.basename(fig)]
    _emit(payload, out_dir, "analyze.json")
    if not base_regular:
        print("error: base point is irregular at the grid resolution",
              file=sys.stderr)
        return 4
    return 0


def cmd_sections(cfg, out_dir=None):
    """Construct the full basis of parallel sections of the stable subbundle."""
    conn = cfg.analyzed_connection()
    base_index = cfg.chart.index_of(cfg.base_point)
    report = derived_flag(conn, tol_rank=cfg.tol_rank, tol_stab=cfg.tol_stab,
                          alpha_floor=cfg.alpha_floor, origin=base_index)
    base_regular = is_regular(report, base_index)
    if not base_regular:
        print("error: base point is irregular at the grid resolution",
              file=sys.stderr)
        return 4
    if report.rank_final == 0:
        print("error: stable subbundle has rank zero; no parallel sections exist",
              file=sys.stderr)
        return 4

    adapted = adapted_frame(conn, report.field, report.origin)
    pframe = integrate_parallel_frame(adapted)
    k = adapted.rank
    f0 = adapted.frame[report.origin][:, :k]
    sections = [make_parallel_section(pframe, f0[:, i]) for i in range(k)]
    residuals = [parallelism_residual(conn, s) for s in sections]

    payload = {
        "command": "sections",
        "base_point": list(cfg.base_point),
        "count": k,
        "residuals": residuals,
        "residual_max": max(residuals),
        "values_at_base": [list(s.at_index(report.origin)) for s in sections],
    }
    payload.update(_flag_payload(report, base_index, base_regular))
    if out_dir:
        files = []
        for i, s in enumerate(sections):
            name = f"section_{i + 1:02d}.csv"
            _write_section_csv(os.path.join(out_dir, name), cfg.chart, s.sample())
            files.append(name)
        payload["files"] = files
        from . import plots
        fig = plots.figure_sections(sections, cfg.chart,
                                    os.path.join(out_dir, "sections.png"))
        if fig:
            payload["figures"] = [os.path.basename(fig)]
    _emit(payload, out_dir, "sections.json")
    print(f"max parallelism residual: {max(residuals):.6e}", file=sys.stderr)
    return 0


def cmd_metric_check(cfg, out_dir=None):
    """Decide whether the configured Christoffel symbols preserve a metric."""
    if cfg.bundle == "explicit":
        raise ConfigError("metric-check needs Christoffel symbols "
                          "(bundle = tangent or sym2)")
    conn = cfg.tangent_connection()
    report = metric_check(conn, base_point=cfg.base_point,
                          tol_rank=cfg.tol_rank, tol_stab=cfg.tol_stab,
                          alpha_floor=cfg.alpha_floor,
                          residual_tol=cfg.residual_tol)
    payload = {
        "command": "metric-check",
        "verdict": report.verdict,
        "detail": report.detail,
        "rank": report.rank,
        "ranks": report.flag.ranks,
        "iterations": report.flag.iterations,
        "base_point": list(report.base_point),
        "base_index": list(report.base_index),
        "base_regular": report.base_regular,
        "regular_fraction": report.flag.field.regular_fraction(),
        "residual": report.residual,
        "witness_coefficients": report.witness_coefficients,
        "witness_at_base": report.witness_at_base,
        "witness_min_eigenvalue": report.witness_min_eigenvalue,
        "tolerances": report.tolerances,
        "caveat": report.flag.caveat,
    }
    if out_dir and report.witness_section is not None:
        from . import plots
        from .bundle import sym2_basis
        mats, _ = sym2_basis(cfg.chart.ndim)
        stack = np.stack(mats)
        grid = np.einsum("...a,aij->...ij", report.witness_section.sample(), stack)
        fig = plots.figure_witness(grid, cfg.chart,
                                   os.path.join(out_dir, "witness.png"))
        if fig:
            payload["figures"] = [os.path.basename(fig)]
        _write_section_csv(os.path.join(out_dir, "witness.csv"), cfg.chart,
                           report.witness_section.sample())
        payload["files"] = ["witness.csv"]
    _emit(payload, out_dir, "metric_check.json")
    if not report.base_regular:
        print("error: base point is irregular at the grid resolution",
              file=sys.stderr)
        return 4
    return 0


def cmd_transport(cfg, out_dir=None):
    """Parallel-transport a vector along the configured polyline path."""
    if cfg.transport_path is None or cfg.transport_vector is None:
        raise ConfigError("transport needs [transport] path and vector")
    conn = cfg.analyzed_connection()
    if cfg.transport_vector.shape != (conn.rank,):
        raise ConfigError(f"[transport]: vector needs {conn.rank} components")
    w_out = parallel_transport(conn, cfg.transport_path, cfg.transport_vector,
                               steps=cfg.transport_steps)
    closed = bool(np.allclose(cfg.transport_path[0], cfg.transport_path[-1],
                              atol=1e-12, rtol=0.0))
    payload = {
        "command": "transport",
        "vector_in": cfg.transport_vector,
        "vector_out": w_out,
        "closed": closed,
        "path_vertices": cfg.transport_path,
        "steps": cfg.transport_steps,
    }
    if closed:
        payload["loop_defect"] = float(
            np.linalg.norm(w_out - cfg.transport_vector))
    if out_dir:
        from . import plots
        fig = plots.figure_transport(cfg.chart, cfg.transport_path,
                                     os.path.join(out_dir, "transport_path.png"))
        if fig:
            payload["figures"] = [os.path.basename(fig)]
    _emit(payload, out_dir, "transport.json")
    return 0


# ---------------------------------------------------------------------------
# entry point

_COMMANDS = {
    "analyze": cmd_analyze,
    "sections": cmd_sections,
    "metric-check": cmd_metric_check,
    "transport": cmd_transport,
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="flatbundle",
        description="Flat subbundles, parallel sections, and metric detection "
                    "for connections given in closed form.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", required=True, help="job INI file")
        p.add_argument("--out", help="directory for CSV grids and figures")
        p.add_argument("--tol-rank", type=float, default=None,
                       help="override the relative rank cutoff")
        p.add_argument("--grid", type=int, default=None,
                       help="override every axis resolution")
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, grid_override=args.grid,
                          tol_rank_override=args.tol_rank)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out_dir = args.out
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    try:
        return _COMMANDS[args.command](cfg, out_dir)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FlagError, IntegrationError, MembershipError,
            SingularEvaluationError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
