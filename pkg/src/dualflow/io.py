"""Configuration parsing, field serialization and run drivers.

Configs are plain ``key = value`` lines under ``[section]`` headers with
``#`` comments.  Unknown keys and duplicate keys are hard errors (naming the
offending lines), so typos cannot silently change an experiment.

Fields serialize to a small binary format: a 32-byte header (magic "DFLD",
format version, d, n, n_t, component count, period length, little-endian)
followed by the raw 64-bit payload, time-major, then component-major, then
space row-major.  Round trips are bit-exact.

Tabular outputs are CSV with a fixed header per record type, floats printed
with 17 significant digits (round-trip exact) and LF line endings; files are
written atomically via a temp-file rename.  Wall-clock timings go to a
separate file so summary CSVs stay byte-identical across reruns of the same
config and seed.
"""

from __future__ import annotations

import dataclasses
import os
import re
import struct
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .euler import Infeasible, ProblemData, recover_velocity
from .fields import DualState, ScalarField, SymMatrixField, VectorField, norm
from .gamma import SweepConfig, alpha_bound, run_sweep
from .grid import Grid, make_grid
from .maximize import (
    MaxOptions,
    euler_dual_objective,
    maximize,
    ns_dual_objective,
    nsp_dual_objective,
)
from .navier_stokes import nsp_recover, recover_vw
from .verification import exact_solution, random_dual, weak_residual_report

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "load_config",
    "write_field",
    "read_field",
    "write_summary",
    "run_from_config",
]

FIELD_MAGIC = b"DFLD"
FIELD_VERSION = 1
_HEADER = struct.Struct("<4sHHIIId")  # magic, version, d, n, n_t, ncomp, t_final

COMMANDS = ("solve-euler", "solve-ns", "solve-nsp", "sweep-nu", "verify")


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------
# config schema


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "yes", "1"):
        return True
    if s.lower() in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_float_list(s: str) -> tuple[float, ...]:
    parts = [p for p in re.split(r"[,\s]+", s.strip()) if p]
    return tuple(float(p) for p in parts)


_SCHEMA = {
    "": {
        "command": str,
        "seed": int,
        "output": str,
    },
    "grid": {"d": int, "n": int, "n_t": int, "t_final": float},
    "problem": {
        "base_state": str,
        "nu": float,
        "amplitude": float,
        "a_v": float,
        "a_w": float,
        "a_p": float,
        "scale_vbar": float,
        "init_norm": float,
        "vbar_file": str,
        "wbar_file": str,
        "pbar_file": str,
        "forcing_file": str,
        "v0_file": str,
        "vbar_modes": str,
        "forcing_modes": str,
    },
    "maximizer": {
        "max_iters": int,
        "grad_tol": float,
        "memory": int,
        "backtrack": float,
        "feas_floor_factor": float,
        "initial_step": float,
    },
    "sweep": {
        "nu_list": _parse_float_list,
        "alpha": float,
        "cutoff_c": float,
        "normalized_penalty": _parse_bool,
    },
}

_DEFAULTS = {
    ("", "seed"): 0,
    ("", "output"): "out",
    ("problem", "base_state"): "zero",
    ("problem", "nu"): 0.0,
    ("problem", "amplitude"): 1.0,
    ("problem", "a_v"): 1.0,
    ("problem", "a_w"): 1.0,
    ("problem", "a_p"): 1.0,
    ("problem", "scale_vbar"): 1.0,
    ("problem", "init_norm"): 0.1,
    ("maximizer", "max_iters"): 500,
    ("maximizer", "grad_tol"): 1e-9,
    ("maximizer", "memory"): 10,
    ("maximizer", "backtrack"): 0.5,
    ("maximizer", "feas_floor_factor"): 1e-8,
    ("maximizer", "initial_step"): 1.0,
    ("sweep", "cutoff_c"): 2.0,
    ("sweep", "normalized_penalty"): False,
}


@dataclass
class RunConfig:
    command: str
    seed: int
    output: str
    grid: dict
    problem: dict
    maximizer: dict
    sweep: dict
    raw: dict = field(default_factory=dict)

    def max_options(self) -> MaxOptions:
        m = self.maximizer
        return MaxOptions(
            max_iters=m["max_iters"],
            grad_tol=m["grad_tol"],
            memory=m["memory"],
            backtrack=m["backtrack"],
            initial_step=m["initial_step"],
        )

    def make_grid(self) -> Grid:
        g = self.grid
        try:
            return make_grid(g["d"], g["n"], g["n_t"], g["t_final"])
        except ValueError as exc:
            raise ConfigError(f"invalid [grid]: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    """Parse and validate a config; errors carry line numbers."""
    section = ""
    seen: dict[tuple[str, str], int] = {}
    values: dict[tuple[str, str], object] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMA or section == "":
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _SCHEMA.get(section, {}):
            where = f"[{section}]" if section else "top level"
            raise ConfigError(f"line {lineno}: unknown key {key!r} in {where}")
        if (section, key) in seen:
            raise ConfigError(
                f"line {lineno}: duplicate key {key!r} (first set on line {seen[(section, key)]})"
            )
        seen[(section, key)] = lineno
        conv = _SCHEMA[section][key]
        try:
            values[(section, key)] = conv(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc

    for dk, dv in _DEFAULTS.items():
        values.setdefault(dk, dv)

    if ("", "command") not in values:
        raise ConfigError("missing required key 'command'")
    command = values[("", "command")]
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; expected one of {COMMANDS}")
    for gk in ("d", "n", "n_t", "t_final"):
        if ("grid", gk) not in values:
            raise ConfigError(f"missing required key {gk!r} in [grid]")

    def section_dict(name: str) -> dict:
        return {k: v for (s, k), v in values.items() if s == name}

    cfg = RunConfig(
        command=command,
        seed=values[("", "seed")],
        output=values[("", "output")],
        grid=section_dict("grid"),
        problem=section_dict("problem"),
        maximizer=section_dict("maximizer"),
        sweep=section_dict("sweep"),
        raw={f"{s}.{k}" if s else k: v for (s, k), v in sorted(values.items())},
    )
    cfg.make_grid()  # validates ranges before any allocation

    if command == "sweep-nu":
        if "nu_list" not in cfg.sweep:
            raise ConfigError("sweep-nu requires 'nu_list' in [sweep]")
        if "alpha" not in cfg.sweep:
            raise ConfigError("sweep-nu requires 'alpha' in [sweep]")
        d = cfg.grid["d"]
        alpha = cfg.sweep["alpha"]
        if not (0.0 < alpha < alpha_bound(d)):
            raise ConfigError(
                f"alpha = {alpha} violates the exponent bound alpha < "
                f"{alpha_bound(d):g} for d = {d}"
            )
    if cfg.problem["base_state"] not in (
        "zero",
        "steady_shear_2d",
        "taylor_green_2d",
        "gradient_flow_check",
    ):
        raise ConfigError(f"unknown base_state {cfg.problem['base_state']!r}")
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


# ----------------------------------------------------------------------
# mode expressions, e.g. "0.5*sin(0,1)*e1 + 0.25*cos(2,0)*e2"

_MODE_RE = re.compile(
    r"^\s*(?P<coef>[-+0-9.eE]+)\s*\*\s*(?P<fn>sin|cos)\s*\(\s*(?P<ks>[-0-9,\s]+)\)\s*\*\s*e(?P<comp>[1-9])\s*$"
)


def parse_mode_expression(expr: str, grid: Grid) -> VectorField:
    """Steady vector field from a sum of named Fourier modes."""
    vals = np.zeros(grid.vector_shape)
    x = grid.coords()
    for term in expr.split("+"):
        m = _MODE_RE.match(term)
        if m is None:
            raise ConfigError(f"bad mode term {term.strip()!r}")
        coef = float(m.group("coef"))
        ks = [int(p) for p in m.group("ks").replace(",", " ").split()]
        if len(ks) != grid.d:
            raise ConfigError(f"mode term {term.strip()!r} needs {grid.d} wavenumbers")
        comp = int(m.group("comp")) - 1
        if comp >= grid.d:
            raise ConfigError(f"component e{comp + 1} out of range for d = {grid.d}")
        phase = 2 * np.pi * sum(k * xi for k, xi in zip(ks, x))
        shape = np.cos(phase) if m.group("fn") == "cos" else np.sin(phase)
        vals[:, comp] += coef * shape[None]
    return VectorField(grid, vals)


# ----------------------------------------------------------------------
# field serialization


def _ncomp(fld) -> int:
    if isinstance(fld, ScalarField):
        return 1
    return fld.values.shape[1]


def write_field(fld, path: str):
    """Bit-exact binary dump of one field."""
    grid = fld.grid
    ncomp = _ncomp(fld)
    header = _HEADER.pack(
        FIELD_MAGIC, FIELD_VERSION, grid.d, grid.n, grid.n_t, ncomp, grid.t_final
    )
    header += b"\x00" * (32 - len(header))
    vals = fld.values.reshape((grid.n_t, ncomp) + grid.spatial_shape)
    payload = np.ascontiguousarray(vals, dtype="<f8").tobytes()
    _atomic_write_bytes(path, header + payload)


def read_field(path: str):
    """Load a field written by :func:`write_field`; type follows the component count."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 32:
        raise ValueError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, d, n, n_t, ncomp, t_final = _HEADER.unpack(blob[: _HEADER.size])
    if magic != FIELD_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {FIELD_MAGIC!r}")
    if version != FIELD_VERSION:
        raise ValueError(
            f"{path}: format version {version} unsupported (reader version {FIELD_VERSION})"
        )
    grid = make_grid(d, n, n_t, t_final)
    expected = n_t * ncomp * n**d * 8
    payload = blob[32:]
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    vals = np.frombuffer(payload, dtype="<f8").astype(float).reshape(
        (n_t, ncomp) + grid.spatial_shape
    )
    if ncomp == 1:
        return ScalarField(grid, vals[:, 0])
    if ncomp == d:
        return VectorField(grid, vals)
    if ncomp == grid.n_sym:
        return SymMatrixField(grid, vals)
    raise ValueError(f"{path}: component count {ncomp} matches no field type for d = {d}")


# ----------------------------------------------------------------------
# CSV summaries


def _format_cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    s = str(v)
    if "," in s or '"' in s or "\n" in s:
        s = '"' + s.replace('"', '""') + '"'
    return s


def _record_items(rec):
    if dataclasses.is_dataclass(rec):
        return [(f.name, getattr(rec, f.name)) for f in dataclasses.fields(rec)]
    return list(rec.items())


def write_summary(records, path: str):
    """Fixed-header CSV with 17-significant-digit floats and LF endings."""
    lines = []
    if records:
        items0 = _record_items(records[0])
        lines.append(",".join(k for k, _ in items0))
        for rec in records:
            items = _record_items(rec)
            if [k for k, _ in items] != [k for k, _ in items0]:
                raise ValueError("records with mixed schemas in one summary")
            lines.append(",".join(_format_cell(v) for _, v in items))
    else:
        lines.append("")
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def write_summary_header_only(header: list[str], path: str):
    _atomic_write_bytes(path, (",".join(header) + "\n").encode("utf-8"))


def _atomic_write_bytes(path: str, data: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-dualflow-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ----------------------------------------------------------------------
# run drivers


def _build_problem(cfg: RunConfig, grid: Grid) -> ProblemData:
    p = cfg.problem
    nu = p["nu"]
    name = p["base_state"]
    if name == "zero":
        vbar = wbar = pbar = None
        v0 = None
    else:
        sol = exact_solution(name, nu=nu, amplitude=p["amplitude"])
        vbar = sol.velocity(grid)
        wbar = sol.stress(grid)
        pbar = sol.pressure(grid)
        v0 = sol.v0(grid)
    forcing = None
    if "vbar_modes" in p:
        vbar = parse_mode_expression(p["vbar_modes"], grid)
    if "forcing_modes" in p:
        forcing = parse_mode_expression(p["forcing_modes"], grid)
    for key, slot in (
        ("vbar_file", "vbar"),
        ("wbar_file", "wbar"),
        ("pbar_file", "pbar"),
        ("forcing_file", "forcing"),
    ):
        if key in p:
            fld = read_field(p[key])
            if slot == "vbar":
                vbar = fld
            elif slot == "wbar":
                wbar = fld
            elif slot == "pbar":
                pbar = fld
            else:
                forcing = fld
    if "v0_file" in p:
        v0 = read_field(p["v0_file"]).values[0]
    if p["scale_vbar"] != 1.0 and vbar is not None:
        vbar = VectorField(grid, p["scale_vbar"] * vbar.values)
    try:
        return ProblemData.make(
            grid,
            a_v=p["a_v"],
            a_w=p["a_w"],
            a_p=p["a_p"],
            nu=nu,
            vbar=vbar,
            wbar=wbar,
            pbar=pbar,
            forcing=forcing,
            v0=v0,
        )
    except ValueError as exc:
        raise ConfigError(f"invalid [problem]: {exc}") from exc


_SOLVE_VARIANT = {"solve-euler": "euler", "solve-ns": "ns", "solve-nsp": "ns_pressure"}


def _echo_config(cfg: RunConfig, outdir: str):
    lines = [f"{k} = {v}" for k, v in cfg.raw.items()]
    lines.append(f"effective.seed = {cfg.seed}")
    lines.append(f"effective.output = {cfg.output}")
    _atomic_write_bytes(
        os.path.join(outdir, "config_echo.txt"), ("\n".join(lines) + "\n").encode()
    )


def _write_iteration_log(result, outdir: str):
    rows = [
        {
            "iteration": i,
            "objective": result.objective_history[i],
            "grad_norm": result.grad_norm_history[i],
            "min_margin": result.margin_history[i],
            "step": result.step_history[i],
        }
        for i in range(len(result.objective_history))
    ]
    write_summary(rows, os.path.join(outdir, "iterations.csv"))


def _dump_state_fields(outdir: str, dual: DualState, primal):
    fdir = os.path.join(outdir, "fields")
    os.makedirs(fdir, exist_ok=True)
    write_field(dual.lam, os.path.join(fdir, "lambda.dfld"))
    write_field(dual.gamma, os.path.join(fdir, "gamma.dfld"))
    if dual.chi is not None:
        write_field(dual.chi, os.path.join(fdir, "chi.dfld"))
    write_field(primal.v, os.path.join(fdir, "v.dfld"))
    if primal.w is not None:
        write_field(primal.w, os.path.join(fdir, "w.dfld"))
    if primal.p is not None:
        write_field(primal.p, os.path.join(fdir, "p.dfld"))


def _run_solve(cfg: RunConfig, outdir: str, dump_fields: bool) -> int:
    variant = _SOLVE_VARIANT[cfg.command]
    grid = cfg.make_grid()
    if variant == "euler" and cfg.problem["nu"] != 0.0:
        raise ConfigError("solve-euler requires nu = 0")
    prob = _build_problem(cfg, grid)
    opts = cfg.max_options()
    rng = np.random.default_rng(cfg.seed)
    init_norm = cfg.problem["init_norm"]
    if init_norm > 0:
        init = random_dual(grid, variant, rng, a_v=prob.a_v, target_norm=init_norm)
    else:
        init = DualState.zeros(grid, variant)

    factory = {
        "euler": euler_dual_objective,
        "ns": ns_dual_objective,
        "ns_pressure": nsp_dual_objective,
    }[variant]
    t0 = time.perf_counter()
    result = maximize(factory(prob), init, opts)
    wall = time.perf_counter() - t0

    recover = {
        "euler": recover_velocity,
        "ns": recover_vw,
        "ns_pressure": nsp_recover,
    }[variant]
    primal = recover(result.state, prob)
    residuals = weak_residual_report(primal, prob)

    vbar_n = norm(prob.vbar)
    v_rel = norm(VectorField(grid, primal.v.values - prob.vbar.values))
    v_rel = v_rel / vbar_n if vbar_n > 0 else v_rel
    w_rel = float("nan")
    if primal.w is not None:
        wbar_n = norm(prob.wbar)
        w_rel = norm(SymMatrixField(grid, primal.w.values - prob.wbar.values))
        w_rel = w_rel / wbar_n if wbar_n > 0 else w_rel
    p_rel = float("nan")
    if primal.p is not None:
        pbar_n = norm(prob.pbar)
        p_rel = norm(ScalarField(grid, primal.p.values - prob.pbar.values))
        p_rel = p_rel / pbar_n if pbar_n > 0 else p_rel

    row = {
        "problem": cfg.problem["base_state"],
        "variant": variant,
        "j_opt": result.objective_history[-1],
        "dual_norm": result.state.norm(),
        "v_rel_err": v_rel,
        "w_rel_err": w_rel,
        "p_rel_err": p_rel,
        "residual_momentum": residuals["momentum"],
        "residual_continuity": residuals["continuity"],
        "residual_constitutive": residuals.get("constitutive", float("nan")),
        "residual_initial": residuals["initial"],
        "iterations": result.iterations,
        "termination": result.termination,
    }
    write_summary([row], os.path.join(outdir, "summary.csv"))
    _write_iteration_log(result, outdir)
    write_summary(
        [{"stage": cfg.command, "wall_time_s": wall}], os.path.join(outdir, "timings.csv")
    )
    if dump_fields:
        _dump_state_fields(outdir, result.state, primal)
    return 0 if result.termination in ("converged", "max_iters") else 3


def _run_sweep(cfg: RunConfig, outdir: str, dump_fields: bool) -> int:
    grid = cfg.make_grid()
    prob = _build_problem(cfg, grid)
    sweep = SweepConfig(
        prob=prob,
        nu_list=tuple(cfg.sweep["nu_list"]),
        alpha=cfg.sweep["alpha"],
        cutoff_c=cfg.sweep["cutoff_c"],
        normalized_penalty=cfg.sweep["normalized_penalty"],
        opts=cfg.max_options(),
    )
    t0 = time.perf_counter()
    rows, extras = run_sweep(sweep)
    wall = time.perf_counter() - t0
    write_summary(rows, os.path.join(outdir, "summary.csv"))
    _write_iteration_log(extras["reference"], outdir)
    write_summary(
        [{"stage": "sweep-nu", "wall_time_s": wall}], os.path.join(outdir, "timings.csv")
    )
    if dump_fields:
        ref = extras["minimizers"][0.0]
        fdir = os.path.join(outdir, "fields")
        os.makedirs(fdir, exist_ok=True)
        write_field(ref.lam, os.path.join(fdir, "lambda_ref.dfld"))
        write_field(ref.gamma, os.path.join(fdir, "gamma_ref.dfld"))
        write_field(ref.chi, os.path.join(fdir, "chi_ref.dfld"))
    bad = [r for r in rows if r.status not in ("converged", "max_iters")]
    return 3 if bad else 0


def _run_verify(cfg: RunConfig, outdir: str) -> int:
    from .verify_battery import run_battery

    grid = cfg.make_grid()
    t0 = time.perf_counter()
    rows = run_battery(grid, seed=cfg.seed)
    wall = time.perf_counter() - t0
    write_summary(rows, os.path.join(outdir, "summary.csv"))
    write_summary(
        [{"stage": "verify", "wall_time_s": wall}], os.path.join(outdir, "timings.csv")
    )
    return 0 if all(r["passed"] for r in rows) else 4


def run_from_config(
    cfg: RunConfig,
    output: str | None = None,
    dump_fields: bool = False,
    seed: int | None = None,
) -> int:
    """Execute a parsed config; returns the process exit code."""
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    outdir = output if output is not None else cfg.output
    os.makedirs(outdir, exist_ok=True)
    _echo_config(cfg, outdir)
    try:
        if cfg.command in _SOLVE_VARIANT:
            return _run_solve(cfg, outdir, dump_fields)
        if cfg.command == "sweep-nu":
            return _run_sweep(cfg, outdir, dump_fields)
        return _run_verify(cfg, outdir)
    except Infeasible:
        return 3
