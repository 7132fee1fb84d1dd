"""Config-driven experiment pipeline and sweeps."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import platform
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Callable

import numpy as np
import scipy

from . import __version__
from .basis import FLAVORS, MultiscaleSpace, build_multiscale_space
from .estimator import (ErrorReport, error_norms, local_residual_norms, posterior_report,
                        space_time_error)
from .fem import FineOperators, assemble_operators
from .grid import Grid, build_grid
from .media import (FractureSet, PermeabilityField, load_fractures, load_permeability,
                    save_permeability, synth_channel_field, uniform_field)
from .spectral import AuxiliarySpace, build_aux_space
from .timestep import (Trajectory, fine_reference, load_series, multiscale_solve,
                       read_snapshot, write_snapshot)

log = logging.getLogger(__name__)

STUDIES = ("single", "basis_sweep", "layer_sweep", "h_sweep", "fracture", "estimator")
SOURCES = ("paper_sinsin", "paper_posteriori", "zero", "file")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage
        self.cause = exc


# built-in data -------------------------------------------------------------

def paper_sinsin_source(x, y, t):
    return 3 * np.pi ** 2 * np.exp(np.pi ** 2 * t) * np.sin(np.pi * x) * np.sin(np.pi * y)


def paper_sinsin_initial(x, y):
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def paper_posteriori_source(x, y, t):
    return t ** 2 + (x + y) ** 2


def sinsin_exact(x, y, t):
    return np.exp(np.pi ** 2 * t) * np.sin(np.pi * x) * np.sin(np.pi * y)


# config ------------------------------------------------------------------

def _decimal(value, name: str) -> Decimal:
    try:
        d = Decimal(str(value))
    except InvalidOperation:
        raise ConfigError(f"{name} must be a decimal number, got {value!r}") from None
    if not d > 0:
        raise ConfigError(f"{name} must be positive, got {value!r}")
    return d


@dataclass
class ExperimentConfig:
    nfx: int
    nfy: int
    Nx: int
    Ny: int
    dt: str
    T: str
    study: str = "single"
    field: dict = dataclasses.field(default_factory=lambda: {"source": "uniform", "value": 1.0})
    fractures: str | None = None
    flavor: str = "constrained"
    L: int = 4
    m: int | dict = 4  # scalar, or {"Nx": m} table used by H sweeps
    scheme: str = "backward"
    source: str = "paper_sinsin"
    initial: str = "paper_sinsin"
    source_file: str | None = None
    initial_file: str | None = None
    L_list: list | None = None
    m_list: list | None = None
    h_list: list | None = None  # Nx or [Nx, m] entries, square coarse grids
    out: str | None = None

    def __post_init__(self):
        self.validate()

    @property
    def n_steps(self) -> int:
        q = _decimal(self.T, "T") / _decimal(self.dt, "dt")
        if q != q.to_integral_value():
            raise ConfigError(f"T={self.T} is not an integer multiple of dt={self.dt}")
        return int(q)

    @property
    def dt_value(self) -> float:
        return float(_decimal(self.dt, "dt"))

    def validate(self) -> None:
        if self.study not in STUDIES:
            raise ConfigError(f"unknown study {self.study!r}; expected one of {STUDIES}")
        if self.flavor not in FLAVORS:
            raise ConfigError(f"unknown flavor {self.flavor!r}; expected one of {FLAVORS}")
        if self.scheme not in ("backward", "forward"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        for sel, name, fname in ((self.source, "source", self.source_file),
                                 (self.initial, "initial", self.initial_file)):
            if sel not in SOURCES:
                raise ConfigError(f"unknown {name} {sel!r}; expected one of {SOURCES}")
            if sel == "file" and not fname:
                raise ConfigError(f"{name}='file' needs {name}_file")
        src = self.field.get("source")
        if src not in ("uniform", "synthetic", "file"):
            raise ConfigError(f"unknown field source {src!r}")
        if src == "file" and "path" not in self.field:
            raise ConfigError("field source 'file' needs 'path'")
        if self.study == "estimator" and self.scheme != "backward":
            raise ConfigError("the estimator study requires scheme='backward'")
        self.n_steps  # noqa: B018  (validates T / dt)
        if isinstance(self.m, dict) and not self.h_list:
            raise ConfigError("a per-H table for m needs h_list")
        for path in (self.fractures, self.source_file, self.initial_file,
                     self.field.get("path")):
            if path and not Path(path).exists():
                raise ConfigError(f"referenced file does not exist: {path}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        for key in ("dt", "T"):
            if key in d and not isinstance(d[key], str):
                raise ConfigError(f"{key} must be given as a decimal string, e.g. \"0.01\"")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def load_config(path) -> ExperimentConfig:
    """Parse a JSON config; relative file paths are taken relative to the config file."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    base = Path(path).parent

    def resolve(p):
        return p if p is None or Path(p).is_absolute() else str(base / p)

    for key in ("fractures", "source_file", "initial_file"):
        if data.get(key):
            data[key] = resolve(data[key])
    if isinstance(data.get("field"), dict) and data["field"].get("path"):
        data["field"] = {**data["field"], "path": resolve(data["field"]["path"])}
    return ExperimentConfig.from_dict(data)


# pipeline ----------------------------------------------------------------

def _stage(name: str, fn: Callable, *args, **kw):
    try:
        return fn(*args, **kw)
    except (StageError, KeyboardInterrupt):
        raise
    except Exception as exc:  # noqa: BLE001  - re-raised with the stage name
        raise StageError(name, exc) from exc


def make_grid(cfg: ExperimentConfig) -> Grid:
    return build_grid(cfg.nfx, cfg.nfy, cfg.Nx, cfg.Ny)


def make_field(cfg: ExperimentConfig, grid: Grid) -> PermeabilityField:
    desc = cfg.field
    if desc["source"] == "uniform":
        return uniform_field(grid, desc.get("value", 1.0))
    if desc["source"] == "synthetic":
        return synth_channel_field(grid, int(desc.get("seed", 0)), float(desc.get("contrast", 1e4)),
                                   int(desc.get("n_channels", 8)), int(desc.get("n_inclusions", 12)))
    return load_permeability(desc["path"], grid)


def make_fractures(cfg: ExperimentConfig, grid: Grid) -> FractureSet:
    return load_fractures(cfg.fractures, grid) if cfg.fractures else FractureSet()


def _nodal_file(path, grid: Grid) -> np.ndarray:
    nfx, nfy, _, vals = read_snapshot(path)
    if (nfx, nfy) != (grid.nfx, grid.nfy):
        raise ConfigError(f"{path}: nodal file is {nfx}x{nfy}, grid is {grid.nfx}x{grid.nfy}")
    return vals.ravel()


def make_loads(cfg: ExperimentConfig, ops: FineOperators) -> np.ndarray:
    g, n, dt = ops.grid, cfg.n_steps, cfg.dt_value
    if cfg.source == "paper_sinsin":
        return load_series(g, paper_sinsin_source, dt, n)
    if cfg.source == "paper_posteriori":
        return load_series(g, paper_posteriori_source, dt, n)
    if cfg.source == "zero":
        return np.zeros((n + 1, g.n_nodes))
    b = ops.M @ _nodal_file(cfg.source_file, g)
    return np.tile(b, (n + 1, 1))


def make_initial(cfg: ExperimentConfig, grid: Grid):
    if cfg.initial == "paper_sinsin":
        return paper_sinsin_initial
    if cfg.initial in ("zero", "paper_posteriori"):
        return np.zeros(grid.n_nodes)
    return _nodal_file(cfg.initial_file, grid)


@dataclass
class RunResult:
    cfg: ExperimentConfig
    grid: Grid
    ops: FineOperators
    aux: AuxiliarySpace
    space: MultiscaleSpace
    fine: Trajectory
    ms: Trajectory
    eps: float
    eps_a: float
    report: ErrorReport | None = None
    extra: dict = field(default_factory=dict)

    @property
    def ms_fine_states(self) -> np.ndarray:
        return np.asarray(self.space.P @ self.ms.states.T).T


class _FineCache:
    """Fine reference shared across sweep rows; it does not depend on the coarse grid."""

    def __init__(self):
        self.key = None
        self.value = None

    def get(self, key, build):
        if key != self.key:
            self.key, self.value = key, build()
        return self.value


def h_pairs(cfg: ExperimentConfig) -> list[tuple[int, int]]:
    """``(Nx, m)`` per sweep row; bare ``Nx`` entries take ``m`` from the scalar or table."""
    out = []
    for entry in cfg.h_list or [cfg.Nx]:
        if isinstance(entry, (list, tuple)):
            out.append((int(entry[0]), int(entry[1])))
            continue
        N = int(entry)
        out.append((N, m_for(cfg, N)))
    return out


def m_for(cfg: ExperimentConfig, N: int) -> int:
    if not isinstance(cfg.m, dict):
        return int(cfg.m)
    if str(N) not in cfg.m:
        raise ConfigError(f"m table has no entry for Nx={N}")
    return int(cfg.m[str(N)])


def run_single(cfg: ExperimentConfig, workers: int = 1, estimate: bool = False,
               fine_cache: _FineCache | None = None) -> RunResult:
    grid = _stage("grid", make_grid, cfg)
    field_ = _stage("media", make_field, cfg, grid)
    fractures = _stage("media", make_fractures, cfg, grid)
    ops = _stage("assembly", assemble_operators, grid, field_, fractures)
    dt, n = cfg.dt_value, cfg.n_steps

    def fine():
        loads = _stage("assembly", make_loads, cfg, ops)
        u0 = make_initial(cfg, grid)
        traj = _stage("fine_reference", fine_reference, ops, loads, u0, dt, n, cfg.scheme)
        return loads, u0, traj

    key = (cfg.nfx, cfg.nfy, json.dumps(cfg.field, sort_keys=True), cfg.fractures,
           cfg.source, cfg.initial, cfg.dt, cfg.T, cfg.scheme)
    loads, u0, fine_traj = fine_cache.get(key, fine) if fine_cache else fine()

    aux = _stage("spectral", build_aux_space, ops, cfg.L, workers=workers)
    space = _stage("basis", build_multiscale_space, ops, aux, m_for(cfg, cfg.Nx), cfg.flavor, workers=workers)
    ms = _stage("time_march", multiscale_solve, space, ops, loads, u0, dt, n, cfg.scheme)
    u_ms = space.P @ ms.states[-1]
    eps, eps_a = _stage("errors", error_norms, fine_traj.states[-1], u_ms, ops.A, ops.M)
    res = RunResult(cfg, grid, ops, aux, space, fine_traj, ms, eps, eps_a)
    if estimate:
        res.report = _stage("estimator", estimate_errors, res, loads)
    return res


def estimate_errors(res: RunResult, loads: np.ndarray) -> ErrorReport:
    ops, dt = res.ops, res.fine.dt
    um = res.ms_fine_states
    eps_L = space_time_error(res.fine, um, None, ops.A, ops.M, dt)
    rsq = local_residual_norms(ops, um, loads, dt)
    e0 = res.fine.states[0] - um[0]
    e0_sq = float(e0 @ (ops.M @ e0))
    return posterior_report(rsq, e0_sq, res.aux.Lambda, res.grid.max_overlap(), eps_L,
                            res.eps, res.eps_a)


# outputs -----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.10e}"
    return str(v)


def write_csv(path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue())


def write_manifest(out: Path, cfg: ExperimentConfig, field_checksum: str) -> None:
    manifest = {
        "config_sha256": cfg.digest(),
        "field_sha256": field_checksum,
        "versions": {"cemgms": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "config": cfg.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _outdir(cfg: ExperimentConfig, out) -> Path | None:
    target = out or cfg.out
    if target is None:
        return None
    p = Path(target)
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_run(res: RunResult, out: Path, prefix: str = "") -> None:
    g, T = res.grid, res.fine.times[-1]
    write_snapshot(out / f"{prefix}fine_T.txt", g, res.fine.states[-1], T)
    write_snapshot(out / f"{prefix}ms_T.txt", g, res.space.P @ res.ms.states[-1], T)
    lines = [f"eps = {res.eps:.10e}", f"eps_a = {res.eps_a:.10e}",
             f"n_ms = {res.space.n_ms}", f"Lambda = {res.aux.Lambda:.10e}"]
    if res.report is not None:
        (out / f"{prefix}report.txt").write_text(res.report.to_text())
        res.report.write_residual_csv(out / f"{prefix}residuals.csv")
    else:
        (out / f"{prefix}report.txt").write_text("\n".join(lines) + "\n")


def solve(cfg: ExperimentConfig, out=None, workers: int = 1) -> RunResult:
    """Single run; writes report, final-time snapshots and manifest when ``out`` is set."""
    res = run_single(cfg, workers)
    d = _outdir(cfg, out)
    if d is not None:
        write_run(res, d)
        write_manifest(d, cfg, res.ops.field.checksum())
    return res


def _sweep(cfg: ExperimentConfig, variants, header, row_of, workers: int,
           estimate: bool = False, on_result=None):
    cache = _FineCache()
    rows = []
    for label, sub in variants:
        try:
            res = run_single(sub, workers, estimate=estimate, fine_cache=cache)
        except Exception as exc:  # noqa: BLE001  - a failed row must not end the sweep
            log.warning("row %s failed: %s", label, exc)
            rows.append(row_of(sub, None) + [f"failed: {exc}".replace(",", ";")])
            continue
        rows.append(row_of(sub, res) + ["ok"])
        if on_result:
            on_result(label, res)
    return header + ["status"], rows


def run_h_sweep(cfg: ExperimentConfig, out=None, workers: int = 1, fracture: bool = False):
    """Rows ``l, h, m, eps, eps_a`` per ``(Nx, m)`` pair of ``h_list``."""
    variants = [(f"H=1/{N}", cfg.replace(Nx=N, Ny=N, m=m, h_list=None)) for N, m in h_pairs(cfg)]
    nan = float("nan")

    def row(sub, res):
        return [sub.L, 1.0 / sub.Nx, sub.m, res.eps if res else nan, res.eps_a if res else nan]

    d = _outdir(cfg, out)
    snap = (lambda label, res: write_run(res, d, f"nx{res.grid.Nx}_")) if (fracture and d) else None
    header, rows = _sweep(cfg, variants, ["l", "h", "m", "eps", "eps_a"], row, workers,
                          on_result=snap)
    if d is not None:
        write_csv(d / ("fracture.csv" if fracture else "h_sweep.csv"), header, rows)
        write_manifest(d, cfg, _field_checksum(cfg))
    return header, rows


def run_basis_sweep(cfg: ExperimentConfig, out=None, workers: int = 1):
    Ls = cfg.L_list or [cfg.L]
    nan = float("nan")
    header, rows = _sweep(cfg, [(f"L={L}", cfg.replace(L=int(L))) for L in Ls],
                          ["l", "eps", "eps_a"],
                          lambda s, r: [s.L, r.eps if r else nan, r.eps_a if r else nan], workers)
    d = _outdir(cfg, out)
    if d is not None:
        write_csv(d / "basis_sweep.csv", header, rows)
        write_manifest(d, cfg, _field_checksum(cfg))
    return header, rows


def run_layer_sweep(cfg: ExperimentConfig, out=None, workers: int = 1):
    ms = cfg.m_list or [m_for(cfg, cfg.Nx)]
    nan = float("nan")
    header, rows = _sweep(cfg, [(f"m={m}", cfg.replace(m=int(m))) for m in ms],
                          ["m", "eps_a"], lambda s, r: [s.m, r.eps_a if r else nan], workers)
    d = _outdir(cfg, out)
    if d is not None:
        write_csv(d / "layer_sweep.csv", header, rows)
        write_manifest(d, cfg, _field_checksum(cfg))
    return header, rows


def run_fracture(cfg: ExperimentConfig, out=None, workers: int = 1):
    """Fracture-augmented H sweep; per-row final-time snapshots."""
    return run_h_sweep(cfg, out, workers, fracture=True)


def run_estimator(cfg: ExperimentConfig, out=None, workers: int = 1):
    """Estimator runs for each ``(Nx, m)`` pair; returns the table and the reports."""
    d = _outdir(cfg, out)
    reports = []

    def keep(label, res):
        reports.append(res.report)
        if d is not None:
            write_run(res, d, f"nx{res.grid.Nx}_")

    nan = float("nan")

    def row(sub, res):
        if res is None:
            return [1.0 / sub.Nx, sub.m, nan, nan, nan, nan, "false"]
        r = res.report
        return [1.0 / sub.Nx, sub.m, r.eps_L, r.eps_R, r.ratio, r.bound,
                str(r.reliable).lower()]

    variants = [(f"H=1/{N}", cfg.replace(Nx=N, Ny=N, m=m, h_list=None)) for N, m in h_pairs(cfg)]
    header, rows = _sweep(cfg, variants,
                          ["h", "m", "eps_l", "eps_r", "ratio", "bound", "reliable"],
                          row, workers, estimate=True, on_result=keep)
    if d is not None:
        write_csv(d / "estimator.csv", header, rows)
        write_manifest(d, cfg, _field_checksum(cfg))
    return header, rows, reports


def _field_checksum(cfg: ExperimentConfig) -> str:
    grid = make_grid(cfg)
    return make_field(cfg, grid).checksum()


def make_field_file(cfg: ExperimentConfig, out=None) -> Path:
    d = _outdir(cfg, out) or Path(".")
    grid = make_grid(cfg)
    fld = make_field(cfg, grid)
    path = d / "field.txt"
    save_permeability(path, fld)
    return path
