"""Configuration-driven experiment pipeline: phantom, fields, compression, inversion.

A run is described by an INI file whose sections map onto the dataclasses
below.  :func:`run` executes one experiment kind and writes data files only
(CSV, VTK, JSON) into the output directory.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import logging
import os
import time
import typing
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from . import born, grid as gridmod, krylov, lowrank, optics, pals
from .grid import Grid, SystemMatrices, point_source_vector

__all__ = [
    "KINDS",
    "ConfigError",
    "StageError",
    "RunSection",
    "GridSection",
    "SetupSection",
    "OpticsSection",
    "SolverSection",
    "CompressionSection",
    "PhantomSection",
    "ReconSection",
    "BenchSection",
    "SeedSection",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "defaults_text",
    "validate",
    "full_diffusion_forward",
    "run",
]

log = logging.getLogger(__name__)

KINDS = ("exp1", "exp2", "exp3", "solver-bench", "compress-bench")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the error."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage
        self.original = exc


# ---------------------------------------------------------------- config ----

@dataclass
class RunSection:
    kind: str = "exp1"
    outdir: str = "hydot_out"
    threads: int = 1
    log_level: str = "INFO"


@dataclass
class GridSection:
    nx: int = 13
    ny: int = 13
    nz: int = 7
    Lx: float = 3.0
    Ly: float = 3.0
    Lz: float = 3.0


@dataclass
class SetupSection:
    n_sources: int = 9
    n_ds: int = 9
    n_wavelengths: int = 25
    lambda_min: float = 600.0
    lambda_max: float = 1000.0
    source_pitch: float = 1.0
    detector_pitch: float = 0.5


@dataclass
class OpticsSection:
    psi: float = 9.4
    b: float = 1.4
    lambda0: float = 600.0
    nu: float = 2.14e10
    A: float = 1.0
    table: str = ""                     # chromophore table path; empty = bundled table


@dataclass
class SolverSection:
    method: str = "krylov"              # krylov | direct
    n: int = 80
    k: int = 10
    m: int = 50
    tol: float = 1e-8
    max_restarts: int = 50
    center_shift: bool = True
    jacobi: bool = False


@dataclass
class CompressionSection:
    eps_d: float = 1e-6
    method: str = "randsvd"             # randsvd | aca_partial
    tolerances: tuple[float, ...] = (1e-3, 1e-6, 1e-9)
    dense_reference: bool = True
    leaf_size: int = 2


@dataclass
class PhantomSection:
    n_p: int = 3
    spread: float = 0.4
    alpha: tuple[float, ...] = (0.5, 1.0)
    beta: tuple[float, ...] = (0.6, 0.9)
    tau: float = 0.1
    eps_h: float = 0.05


@dataclass
class ReconSection:
    n_p: int = 5
    snr_db: float = 33.0
    gamma: float = 1.2
    max_outer: int = 60
    max_inner: int = 5
    init_alpha: float = 0.5
    init_beta: float = 1.0
    init_jitter: float = 0.0
    known_concentrations: bool = True
    projected: bool = True
    smoothing_start: float = 2.0
    smoothing_rate: float = 0.5
    threshold: float = 0.5


@dataclass
class BenchSection:
    k_values: tuple[int, ...] = (0, 5, 10, 15)
    source_counts: tuple[int, ...] = (4, 8, 16)
    repeats: int = 3
    source: int = 0                     # right-hand side used by solver-bench
    offset: tuple[float, ...] = (0.1, 0.2, 0.0)     # shift of that source off the symmetry axes


@dataclass
class SeedSection:
    truth: int = 1
    noise: int = 2
    init: int = 3
    compression: int = 0


_SECTIONS = {
    "run": RunSection,
    "grid": GridSection,
    "setup": SetupSection,
    "optics": OpticsSection,
    "solver": SolverSection,
    "compression": CompressionSection,
    "phantom": PhantomSection,
    "reconstruction": ReconSection,
    "bench": BenchSection,
    "seeds": SeedSection,
}


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    grid: GridSection = field(default_factory=GridSection)
    setup: SetupSection = field(default_factory=SetupSection)
    optics: OpticsSection = field(default_factory=OpticsSection)
    solver: SolverSection = field(default_factory=SolverSection)
    compression: CompressionSection = field(default_factory=CompressionSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    reconstruction: ReconSection = field(default_factory=ReconSection)
    bench: BenchSection = field(default_factory=BenchSection)
    seeds: SeedSection = field(default_factory=SeedSection)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(raw: str, tp, where: str):
    raw = raw.strip()
    try:
        if tp is bool:
            val = raw.lower()
            if val in ("1", "true", "yes", "on"):
                return True
            if val in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if tp in (int, float, str):
            return tp(raw)
        if typing.get_origin(tp) is tuple:
            inner = typing.get_args(tp)[0]
            return tuple(inner(v) for v in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}: unsupported type {tp}")


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    """Parse INI text; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str                     # keep key case (Lx, A)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = ExperimentConfig()
    for name in cp.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
        cls = _SECTIONS[name]
        hints = typing.get_type_hints(cls)
        values = {}
        for key, raw in cp.items(name):
            if key not in hints:
                raise ConfigError(f"{source}: unknown key '{key}' in [{name}]")
            values[key] = _coerce(raw, hints[key], f"[{name}] {key}")
        setattr(cfg, name, dataclasses.replace(getattr(cfg, name), **values))
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def defaults_text() -> str:
    """Every option with its default value, as a loadable INI file."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cfg = ExperimentConfig()
    for name in _SECTIONS:
        cp[name] = {k: _format(v) for k, v in asdict(getattr(cfg, name)).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _apply_env(cfg: ExperimentConfig) -> ExperimentConfig:
    run = cfg.run
    if "HYDOT_THREADS" in os.environ:
        try:
            run = dataclasses.replace(run, threads=int(os.environ["HYDOT_THREADS"]))
        except ValueError:
            raise ConfigError(f"HYDOT_THREADS must be an integer, got {os.environ['HYDOT_THREADS']!r}") from None
    if os.environ.get("HYDOT_OUTDIR"):
        run = dataclasses.replace(run, outdir=os.environ["HYDOT_OUTDIR"])
    return dataclasses.replace(cfg, run=run)


def _table(cfg: ExperimentConfig) -> optics.ChromophoreTable:
    return optics.load_table(cfg.optics.table) if cfg.optics.table else optics.default_table()


def _optical_params(cfg: ExperimentConfig) -> optics.OpticalParams:
    o = cfg.optics
    return optics.OpticalParams(o.psi, o.b, o.lambda0, o.nu, o.A)


def _solver_config(cfg: ExperimentConfig, k=None) -> krylov.SolverConfig:
    s = cfg.solver
    return krylov.SolverConfig(n=s.n, k=s.k if k is None else k, m=s.m, tol=s.tol,
                               max_restarts=s.max_restarts, center_shift=s.center_shift,
                               jacobi=s.jacobi, threads=cfg.run.threads)


def _wavelengths(cfg: ExperimentConfig) -> np.ndarray:
    s = cfg.setup
    return np.linspace(s.lambda_min, s.lambda_max, s.n_wavelengths)


def _grid(cfg: ExperimentConfig) -> Grid:
    g = cfg.grid
    return gridmod.build_grid(g.nx, g.ny, g.nz, g.Lx, g.Ly, g.Lz)


def _setup(cfg: ExperimentConfig, grid: Grid, table, n_sources=None) -> born.MeasurementSetup:
    s = cfg.setup
    return born.make_setup(grid, s.n_sources if n_sources is None else n_sources, _wavelengths(cfg),
                           table, _optical_params(cfg), s.n_ds, s.source_pitch, s.detector_pitch)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check every section against the preconditions of the module that consumes it.

    Builds the grid, optics and measurement geometry (cheap) so that geometric
    conflicts surface here rather than mid-run.  Raises :class:`ConfigError`.
    """
    cfg = _apply_env(cfg)
    r, s, c, rc, b = cfg.run, cfg.setup, cfg.compression, cfg.reconstruction, cfg.bench
    checks = [
        (r.kind in KINDS, f"[run] kind must be one of {', '.join(KINDS)}"),
        (r.threads >= 1, "[run] threads must be >= 1"),
        (isinstance(logging.getLevelName(r.log_level.upper()), int), "[run] unknown log_level"),
        (s.n_wavelengths >= 1 and s.lambda_max >= s.lambda_min, "[setup] bad wavelength range"),
        (s.n_sources >= 1, "[setup] n_sources must be >= 1"),
        (cfg.solver.method in ("krylov", "direct"), "[solver] method must be krylov or direct"),
        (c.method in ("randsvd", "aca_partial"), "[compression] method must be randsvd or aca_partial"),
        (0 < c.eps_d < 1 and all(0 < t < 1 for t in c.tolerances), "[compression] tolerances must lie in (0, 1)"),
        (c.leaf_size >= 1, "[compression] leaf_size must be >= 1"),
        (len(cfg.phantom.alpha) == 2 and len(cfg.phantom.beta) == 2, "[phantom] alpha and beta are (low, high) ranges"),
        (min(cfg.phantom.beta) > 0 and cfg.phantom.n_p >= 1, "[phantom] widths must be positive"),
        (rc.n_p >= 1 and rc.init_beta > 0 and rc.max_outer >= 1 and rc.max_inner >= 1,
         "[reconstruction] n_p, init_beta and iteration limits must be positive"),
        (rc.gamma > 1, "[reconstruction] gamma must exceed 1"),
        (rc.smoothing_start >= 1 and 0 < rc.smoothing_rate < 1,
         "[reconstruction] smoothing_start must be >= 1 and smoothing_rate in (0, 1)"),
        (0 < rc.threshold < 1, "[reconstruction] threshold must lie in (0, 1)"),
        (len(b.k_values) >= 1 and min(b.k_values) >= 0, "[bench] k_values must be nonnegative"),
        (len(b.offset) == 3, "[bench] offset needs three components"),
        (len(b.source_counts) >= 1 and min(b.source_counts) >= 1 and b.repeats >= 1,
         "[bench] source_counts and repeats must be positive"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    try:
        grid = _grid(cfg)
        table = _table(cfg)
        _optical_params(cfg)
        _solver_config(cfg)
        table.extinction_at(_wavelengths(cfg))
        counts = b.source_counts if r.kind == "compress-bench" else (s.n_sources,)
        for n in counts:
            _setup(cfg, grid, table, n)
        if r.kind == "solver-bench":
            for k in b.k_values:
                _solver_config(cfg, k)
            if not 0 <= b.source < s.n_sources:
                raise ValueError("[bench] source index out of range")
    except (ValueError, OSError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


# ------------------------------------------------------------- pipeline ----

def full_diffusion_forward(grid: Grid, system: SystemMatrices, setup: born.MeasurementSetup,
                           mu, c) -> np.ndarray:
    """Detector fluence from the unlinearized discrete model, in measurement order.

    The absorption term carries ``mu_a + mu * (E(lam) @ c)`` at every vertex and
    each wavelength's operator is factorized once.  Readout uses the same
    trilinear weights as the point sources.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (grid.N,):
        raise ValueError(f"shape vector must have {grid.N} entries")
    sig, sigp = setup.shifts()
    D = setup.diffusion()
    ext = setup.table.extinction_at(setup.wavelengths)
    w = system.mass_diagonal
    nu = setup.params.nu
    src = [system.restrict(point_source_vector(grid, r)) for r in setup.sources]
    det = [[system.restrict(point_source_vector(grid, r)) for r in dets] for dets in setup.detectors]
    y = np.empty(setup.n_meas)
    for l in range(setup.n_wl):
        dmu = mu * float(ext[l] @ c)
        A = system.K + sig[l] * system.M + sigp[l] * system.R + sp.diags(nu / D[l] * w * dmu)
        lu = sla.splu(A.tocsc())
        for s in range(setup.n_sources):
            phi = lu.solve(src[s]) / D[l]
            for d in range(setup.n_ds):
                y[setup.index(s, d, l)] = det[s][d] @ phi
    return y


class _Outputs:
    def __init__(self, outdir):
        self.dir = Path(outdir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = {}

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.files[name] = str(p)
        return p

    def csv(self, name: str, header, rows):
        with self.path(name).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)


@contextmanager
def _stage(name: str, timings: dict):
    log.info("stage %s", name)
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def _f(x) -> str:
    return f"{x:.6g}"


def _telemetry(out: _Outputs, name: str, wavelengths, provider_stats):
    rows = []
    for _, fams in provider_stats:
        for fam in fams:
            if fam is not None:
                rows.extend(fam.stats)
    if rows:
        krylov.write_telemetry(out.path(name), np.tile(wavelengths, len(rows) // len(wavelengths)), rows)


def _compress(tree, eps, provider, cfg, counter=None):
    return lowrank.recursive_lowrank(tree, eps, provider, method=cfg.compression.method,
                                     seed=cfg.seeds.compression, threads=cfg.run.threads,
                                     counter=counter)


def _level_rows(levels, extra=()):
    return [list(extra) + [lvl, d["nodes"], d["rank"], d["child_rank"], _f(d["delta"]), _f(d["max_delta"])]
            for lvl, d in lowrank.level_table(levels).items()]


_LEVEL_HEADER = ["level", "nodes", "rank", "child_rank_sum", "delta", "max_delta"]


def _concentration_errors(c_hat, table):
    """Errors relative to the anomaly's absolute concentrations and to the contrast."""
    absolute = table.background + table.anomaly
    rel_abs = np.abs(c_hat - table.anomaly) / np.abs(absolute)
    rel_contrast = np.abs(c_hat - table.anomaly) / np.abs(table.anomaly)
    return rel_abs, rel_contrast


def _reconstruction(cfg: ExperimentConfig, out: _Outputs, summary: dict, timings: dict):
    kind = cfg.run.kind
    ph, rc = cfg.phantom, cfg.reconstruction
    with _stage("setup", timings):
        grid = _grid(cfg)
        system = gridmod.assemble_system(grid)
        table = _table(cfg)
        setup = _setup(cfg, grid, table)
        c_true = table.anomaly
        truth = pals.random_params(grid, ph.n_p, rng=cfg.seeds.truth, tau=ph.tau, eps_h=ph.eps_h,
                                   spread=ph.spread, alpha=ph.alpha, beta=ph.beta)
        mu_true = pals.shape(truth, grid)
        summary["truth_volume"] = int(np.sum(mu_true >= rc.threshold))
        summary["n_vertices"] = grid.N
        summary["n_measurements"] = setup.n_meas

    with _stage("fields", timings):
        provider = born.BlockProvider(grid, system, setup, _solver_config(cfg), cfg.solver.method, cache=True)
        blocks = [provider(s) for s in range(setup.n_sources)]
        _telemetry(out, "telemetry.csv", setup.wavelengths, provider.stats)
        phi_i, _, _ = born.source_fields(grid, system, setup, 0, method="direct")
        gridmod.write_vtk(out.path("incident_s0.vtk"), grid,
                          {f"phi_{lam:g}nm": phi_i[l] for l, lam in enumerate(setup.wavelengths[:1])})

    def H_apply(x):
        return np.concatenate([blk @ x for blk in blocks])

    with _stage("data", timings):
        y_born = born.forward_measure(H_apply, c_true, mu_true, setup)
        if kind == "exp3":
            y_inc = full_diffusion_forward(grid, system, setup, np.zeros(grid.N), c_true)
            y_full = full_diffusion_forward(grid, system, setup, mu_true, c_true)
            y_clean = y_full - y_inc
            err = np.linalg.norm(y_clean - y_born)
            summary["model_error_snr_db"] = float(20 * np.log10(np.linalg.norm(y_clean) / err)) if err else np.inf
            summary["born_vs_full_rel"] = float(err / np.linalg.norm(y_clean))
            rows = []
            for s in range(setup.n_sources):
                for d in range(setup.n_ds):
                    for l, lam in enumerate(setup.wavelengths):
                        i = setup.index(s, d, l)
                        rows.append([s, d, f"{lam:g}", f"{y_born[i]:.10e}", f"{y_clean[i]:.10e}"])
            out.csv("born_vs_full.csv", ["source", "detector", "wavelength_nm", "born", "full"], rows)
        else:
            y_clean = y_born
        y, eta, W = born.add_noise(y_clean, rc.snr_db, rng=cfg.seeds.noise)
        noise_norm = float(np.linalg.norm(W * eta))

    tols = tuple(cfg.compression.tolerances) if kind == "exp1" else (cfg.compression.eps_d,)
    variants = [(f"tol={t:g}", t) for t in tols]
    if kind == "exp1" and cfg.compression.dense_reference:
        variants.append(("dense", None))
    tree = lowrank.build_cluster_tree(setup.sources[:, :2], leaf_size=cfg.compression.leaf_size)
    recon_cfg = pals.ReconConfig(gamma=rc.gamma, max_outer=rc.max_outer, max_inner=rc.max_inner,
                                 projected=rc.projected, smoothing_start=rc.smoothing_start,
                                 smoothing_rate=rc.smoothing_rate)
    p0 = pals.initial_params(grid, rc.n_p, rc.init_alpha, rc.init_beta, tau=ph.tau, eps_h=ph.eps_h,
                             rng=cfg.seeds.init, jitter=rc.init_jitter)
    metric_rows, time_rows, results = [], [], {}
    primary = f"tol={cfg.compression.eps_d:g}"
    species = list(table.species)
    for label, tol in variants:
        with _stage(f"compression[{label}]", timings):
            t0 = time.perf_counter()
            if tol is None:
                op, rank = np.vstack(blocks), min(setup.n_meas, grid.N)
            else:
                F, levels = _compress(tree, tol, provider, cfg)
                op, rank = F, F.rank
                if label == primary:
                    out.csv("compression_levels.csv", _LEVEL_HEADER, _level_rows(levels))
            t_comp = time.perf_counter() - t0
        with _stage(f"reconstruction[{label}]", timings):
            t0 = time.perf_counter()
            r = pals.reconstruct(y, op, setup, W, p0, grid, recon_cfg, noise_norm, mu_true,
                                 c_fixed=c_true if rc.known_concentrations else None)
            t_rec = time.perf_counter() - t0
        l2, dice, _ = pals.metrics(mu_true, r.mu, rc.threshold)
        rel_abs, rel_con = _concentration_errors(r.c, table)
        metric_rows.append([label, "" if tol is None else f"{tol:g}", rank, f"{l2:.6f}", f"{dice:.6f}",
                            f"{r.resnorm / noise_norm:.6f}" if noise_norm else "", r.reason]
                           + [f"{e:.6f}" for e in rel_abs] + [f"{e:.6f}" for e in rel_con])
        time_rows.append([label, f"{t_comp:.4f}", f"{t_rec:.4f}"])
        results[label] = dict(rank=int(rank), l2=l2, dice=dice, reason=r.reason, converged=r.converged,
                              c=r.c.tolist(), c_err_absolute=rel_abs.tolist(),
                              c_err_contrast=rel_con.tolist(), outer_iters=1 + max(t["outer_iter"] for t in r.trace))
        if label == primary or (tol is None and primary not in dict(variants)):
            pals.write_trace(out.path("trace.csv"), r.trace)
            gridmod.write_vtk(out.path("shape.vtk"), grid, {"mu_true": mu_true, "mu_hat": r.mu})
    out.csv("metrics.csv",
            ["label", "tolerance", "rank", "l2_rel", "dice", "resnorm_over_noise", "stop_reason"]
            + [f"c_err_abs_{s}" for s in species] + [f"c_err_contrast_{s}" for s in species],
            metric_rows)
    out.csv("timings.csv", ["label", "compression_s", "reconstruction_s"], time_rows)
    summary.update(results=results, noise_norm=noise_norm, c_true=c_true.tolist(), species=species)


def _solver_bench(cfg: ExperimentConfig, out: _Outputs, summary: dict, timings: dict):
    with _stage("setup", timings):
        grid = _grid(cfg)
        system = gridmod.assemble_system(grid)
        setup = _setup(cfg, grid, _table(cfg))
        sig, sigp = setup.shifts()
        r = setup.sources[cfg.bench.source] + np.asarray(cfg.bench.offset)
        if not grid.contains(r):
            raise ValueError(f"offset bench source {r} lies outside the grid")
        b = system.restrict(point_source_vector(grid, r))
    rows, totals = [], {}
    for k in cfg.bench.k_values:
        with _stage(f"solve[k={k}]", timings):
            best, res = np.inf, None
            for _ in range(cfg.bench.repeats):
                t0 = time.perf_counter()
                res = krylov.solve_family(system.K, system.M, system.R, b, sig, sigp, _solver_config(cfg, k))
                best = min(best, time.perf_counter() - t0)
            krylov.write_telemetry(out.path(f"telemetry_k{k}.csv"), setup.wavelengths, res)
            rows.append([k, res.k_used, res.total_iters, res.total_matvecs, res.phase1_matvecs,
                         f"{max(s.relres for s in res.stats):.3e}", f"{best:.4f}"])
            totals[k] = dict(iters=res.total_iters, matvecs=res.total_matvecs, seconds=best,
                             k_used=res.k_used, per_system_iters=[s.iters for s in res.stats])
    out.csv("solver_bench.csv", ["k", "k_used", "total_iters", "total_matvecs", "phase1_matvecs",
                                 "max_relres", "seconds"], rows)
    summary["solver_bench"] = {str(k): v for k, v in totals.items()}
    if 0 in totals and 10 in totals and totals[0]["iters"]:
        summary["iteration_reduction_k10_pct"] = 100.0 * (1 - totals[10]["iters"] / totals[0]["iters"])
        summary["time_reduction_k10_pct"] = 100.0 * (1 - totals[10]["seconds"] / totals[0]["seconds"])


def _compress_bench(cfg: ExperimentConfig, out: _Outputs, summary: dict, timings: dict):
    with _stage("setup", timings):
        grid = _grid(cfg)
        system = gridmod.assemble_system(grid)
        table = _table(cfg)
    eps = cfg.compression.eps_d
    rows, level_rows, bench = [], [], {}
    for ns in cfg.bench.source_counts:
        with _stage(f"fields[Ns={ns}]", timings):
            setup = _setup(cfg, grid, table, ns)
            provider = born.BlockProvider(grid, system, setup, _solver_config(cfg), cfg.solver.method,
                                          cache=True)
            blocks = [provider(s) for s in range(ns)]
            H = np.vstack(blocks)
            nH = np.linalg.norm(H)
        with _stage(f"compress[Ns={ns}]", timings):
            tree = lowrank.build_cluster_tree(setup.sources[:, :2], leaf_size=cfg.compression.leaf_size)
            t_rec, t_dir = np.inf, np.inf
            for _ in range(cfg.bench.repeats):
                t0 = time.perf_counter()
                F, levels = _compress(tree, eps, provider, cfg)
                t_rec = min(t_rec, time.perf_counter() - t0)
                t0 = time.perf_counter()
                G = lowrank.randsvd(np.vstack(blocks), eps, rng=cfg.seeds.compression)
                t_dir = min(t_dir, time.perf_counter() - t0)
            e_rec = np.linalg.norm(H - F.to_dense()) / nH
            e_dir = np.linalg.norm(H - G.to_dense()) / nH
        rows.append([ns, "recursive", F.rank, f"{e_rec:.3e}", f"{t_rec:.4f}"])
        rows.append([ns, "direct", G.rank, f"{e_dir:.3e}", f"{t_dir:.4f}"])
        level_rows.extend(_level_rows(levels, (ns,)))
        bench[str(ns)] = dict(recursive_s=t_rec, direct_s=t_dir, recursive_rank=F.rank, direct_rank=G.rank,
                              recursive_err=e_rec, direct_err=e_dir,
                              max_delta=max((d["max_delta"] for d in lowrank.level_table(levels).values()),
                                            default=0.0))
    out.csv("compress_bench.csv", ["n_sources", "method", "rank", "rel_error", "seconds"], rows)
    out.csv("compression_levels.csv", ["n_sources"] + _LEVEL_HEADER, level_rows)
    summary["compress_bench"] = bench


_RUNNERS = {
    "exp1": _reconstruction,
    "exp2": _reconstruction,
    "exp3": _reconstruction,
    "solver-bench": _solver_bench,
    "compress-bench": _compress_bench,
}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else str(float(x))
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def run(cfg: ExperimentConfig) -> dict:
    """Execute ``cfg.run.kind`` and return ``{file name: path}`` of everything written.

    Environment overrides (``HYDOT_THREADS``, ``HYDOT_OUTDIR``) are applied
    first.  A failing stage raises :class:`StageError`; files written before the
    failure stay in place and ``summary.json`` records the failed stage.
    """
    cfg = validate(cfg)
    out = _Outputs(cfg.run.outdir)
    timings: dict = {}
    summary = dict(kind=cfg.run.kind, config=cfg.to_dict(), seeds=asdict(cfg.seeds), status="ok")
    log.info("seeds %s", asdict(cfg.seeds))
    try:
        _RUNNERS[cfg.run.kind](cfg, out, summary, timings)
    except StageError as exc:
        summary.update(status="failed", failed_stage=exc.stage, error=str(exc.original))
        raise
    finally:
        summary["timings"] = timings
        summary["files"] = dict(out.files)
        out.path("summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    return dict(out.files)
