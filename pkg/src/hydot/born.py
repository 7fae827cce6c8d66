"""Incident/adjoint fields, Born sensitivity blocks and the linear measurement model."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as sla

from .grid import Grid, SystemMatrices, point_source_vector
from .krylov import ConvergenceError, SolverConfig, solve_family
from .optics import ChromophoreTable, OpticalParams, diffusion_coefficient, shifts

__all__ = [
    "MeasurementSetup",
    "FieldSet",
    "source_lattice",
    "detector_pattern",
    "make_setup",
    "solve_rhs",
    "compute_fields",
    "source_fields",
    "assemble_H_block",
    "BlockProvider",
    "dense_H",
    "apply_operator",
    "forward_measure",
    "add_noise",
    "write_block",
    "read_block",
]

log = logging.getLogger(__name__)


@dataclass
class MeasurementSetup:
    """Sources, detectors and wavelengths; fixes the ordering of ``y``.

    Measurement ``(s, d, l)`` sits at row ``(s * n_ds + d) * n_wl + l``.
    """

    sources: np.ndarray                 # (n_s, 3)
    detectors: np.ndarray               # (n_s, n_ds, 3)
    wavelengths: np.ndarray             # (n_wl,)
    table: ChromophoreTable
    params: OpticalParams = field(default_factory=OpticalParams)
    noise_std: float = 0.0

    def __post_init__(self):
        self.sources = np.atleast_2d(np.asarray(self.sources, dtype=float))
        self.detectors = np.asarray(self.detectors, dtype=float)
        self.wavelengths = np.atleast_1d(np.asarray(self.wavelengths, dtype=float))
        if self.detectors.ndim == 2:
            self.detectors = np.broadcast_to(self.detectors, (len(self.sources),) + self.detectors.shape).copy()
        if self.detectors.shape[:1] != self.sources.shape[:1] or self.detectors.shape[-1] != 3:
            raise ValueError("detectors must have shape (n_sources, n_ds, 3)")

    @property
    def n_sources(self) -> int:
        return self.sources.shape[0]

    @property
    def n_ds(self) -> int:
        return self.detectors.shape[1]

    @property
    def n_wl(self) -> int:
        return self.wavelengths.size

    @property
    def n_meas(self) -> int:
        return self.n_sources * self.n_ds * self.n_wl

    @property
    def block_rows(self) -> int:
        return self.n_ds * self.n_wl

    def index(self, s, d, l) -> int:
        return (s * self.n_ds + d) * self.n_wl + l

    def extinction_rows(self) -> np.ndarray:
        """``(M, n_sp)`` extinction at each measurement's wavelength (the stacked ``E_i``)."""
        ext = self.table.extinction_at(self.wavelengths)
        return np.tile(ext, (self.n_sources * self.n_ds, 1))

    def shifts(self):
        return shifts(self.wavelengths, self.table, self.params)

    def diffusion(self) -> np.ndarray:
        return diffusion_coefficient(self.wavelengths, self.params)

    def subset(self, idx) -> "MeasurementSetup":
        idx = np.asarray(idx)
        return MeasurementSetup(self.sources[idx], self.detectors[idx], self.wavelengths,
                                self.table, self.params, self.noise_std)


def source_lattice(grid: Grid, n_sources: int, pitch: float = 1.0) -> np.ndarray:
    """``n_sources`` points on the ``z = Lz`` face, on a near-square lattice about the axis."""
    if n_sources < 1:
        raise ValueError("need at least one source")
    nx = int(np.ceil(np.sqrt(n_sources)))
    ny = int(np.ceil(n_sources / nx))
    xs = (np.arange(nx) - (nx - 1) / 2) * pitch
    ys = (np.arange(ny) - (ny - 1) / 2) * pitch
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    pts = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, grid.Lz)])[:n_sources]
    if not all(grid.contains(p) for p in pts):
        raise ValueError("source lattice does not fit inside the grid box")
    return pts


def detector_pattern(source, n_ds: int = 9, pitch: float = 0.5, z: float = 0.0) -> np.ndarray:
    """Square ``sqrt(n_ds) x sqrt(n_ds)`` pattern on the ``z`` plane, centred under ``source``."""
    side = int(round(np.sqrt(n_ds)))
    if side * side != n_ds:
        raise ValueError("n_ds must be a perfect square")
    off = (np.arange(side) - (side - 1) / 2) * pitch
    X, Y = np.meshgrid(off, off, indexing="xy")
    return np.column_stack([source[0] + X.ravel(), source[1] + Y.ravel(), np.full(n_ds, z)])


def make_setup(grid: Grid, n_sources: int, wavelengths, table: ChromophoreTable,
               params: OpticalParams | None = None, n_ds: int = 9,
               source_pitch: float = 1.0, detector_pitch: float = 0.5) -> MeasurementSetup:
    src = source_lattice(grid, n_sources, source_pitch)
    det = np.stack([detector_pattern(s, n_ds, detector_pitch) for s in src])
    for p in det.reshape(-1, 3):
        if not grid.contains(p):
            raise ValueError(f"detector {p} lies outside the grid box")
    return MeasurementSetup(src, det, wavelengths, table, params or OpticalParams())


@dataclass
class FieldSet:
    """Fluence fields ``x / D(lambda)`` for every source and its detectors."""

    incident: np.ndarray        # (n_s, n_wl, N)
    adjoint: np.ndarray         # (n_s, n_ds, n_wl, N)
    D: np.ndarray               # (n_wl,) source scaling actually applied
    stats: list = field(default_factory=list)


def solve_rhs(system: SystemMatrices, b, sigma, sigma_prime, D, solver: SolverConfig | None = None,
              method: str = "krylov", lu=None, tag=None):
    """Fields for one load vector across every wavelength: ``(n_wl, N)`` and stats."""
    b = system.restrict(b)
    if method == "direct":
        lu = lu or _factorize(system, sigma, sigma_prime)
        X = np.vstack([f.solve(b) for f in lu])
        return X / np.asarray(D)[:, None], None
    if method != "krylov":
        raise ValueError(f"unknown field solver {method!r}")
    try:
        res = solve_family(system.K, system.M, system.R, b, sigma, sigma_prime, solver)
    except ConvergenceError as exc:
        raise ConvergenceError(f"{tag}: {exc}", index=exc.index, relres=exc.relres) from exc
    return res.X / np.asarray(D)[:, None], res


def _factorize(system: SystemMatrices, sigma, sigma_prime):
    return [sla.splu((system.K + s * system.M + t * system.R).tocsc()) for s, t in zip(sigma, sigma_prime)]


def source_fields(grid: Grid, system: SystemMatrices, setup: MeasurementSetup, s: int,
                  solver: SolverConfig | None = None, method: str = "krylov", lu=None):
    """Incident ``(n_wl, N)`` and adjoint ``(n_ds, n_wl, N)`` fields of source ``s``."""
    sig, sigp = setup.shifts()
    D = setup.diffusion()
    if method == "direct" and lu is None:
        lu = _factorize(system, sig, sigp)
    stats = []
    phi_i, st = solve_rhs(system, point_source_vector(grid, setup.sources[s]), sig, sigp, D,
                          solver, method, lu, tag=f"source {s}")
    stats.append(st)
    phi_d = np.empty((setup.n_ds, setup.n_wl, grid.N))
    for d in range(setup.n_ds):
        phi_d[d], st = solve_rhs(system, point_source_vector(grid, setup.detectors[s, d]), sig, sigp, D,
                                 solver, method, lu, tag=f"source {s} detector {d}")
        stats.append(st)
    return phi_i, phi_d, stats


def compute_fields(grid: Grid, system: SystemMatrices, setup: MeasurementSetup,
                   solver: SolverConfig | None = None, method: str = "krylov") -> FieldSet:
    """All incident and adjoint fields; ``method='direct'`` factorizes each ``A_j`` once."""
    sig, sigp = setup.shifts()
    lu = _factorize(system, sig, sigp) if method == "direct" else None
    inc = np.empty((setup.n_sources, setup.n_wl, grid.N))
    adj = np.empty((setup.n_sources, setup.n_ds, setup.n_wl, grid.N))
    stats = []
    for s in range(setup.n_sources):
        inc[s], adj[s], st = source_fields(grid, system, setup, s, solver, method, lu)
        stats.extend(st)
    return FieldSet(inc, adj, setup.diffusion(), stats)


def _block(phi_i, phi_d, weights, nu):
    # rows (d, l), columns vertices
    blk = phi_d * phi_i[None, :, :]
    blk *= -nu * weights
    return blk.reshape(-1, phi_i.shape[-1])


def assemble_H_block(fieldset: FieldSet, s: int, grid: Grid, system: SystemMatrices | None = None,
                     nu: float | None = None) -> np.ndarray:
    """Rows of ``H`` for source ``s``: entry ``-nu * phi_d[n] * phi_i[n] * w[n]``.

    ``w`` is the lumped mass diagonal (recomputed from ``grid`` when ``system``
    is not given).
    """
    from .grid import assemble_mass

    w = system.mass_diagonal if system is not None else assemble_mass(grid).diagonal()
    nu = OpticalParams().nu if nu is None else nu
    return _block(fieldset.incident[s], fieldset.adjoint[s], w, nu)


class BlockProvider:
    """On-demand ``H_s`` blocks; fields are solved per source and not retained.

    ``stats`` collects ``(source, FamilyResult list)`` for every Krylov field
    solve, for telemetry.
    """

    def __init__(self, grid: Grid, system: SystemMatrices, setup: MeasurementSetup,
                 solver: SolverConfig | None = None, method: str = "krylov", cache: bool = False):
        self.grid, self.system, self.setup = grid, system, setup
        self.solver, self.method = solver, method
        self._lu = None
        self._cache = {} if cache else None
        self.calls = 0
        self.stats = []

    @property
    def shape(self):
        return self.setup.block_rows, self.grid.N

    def __call__(self, s: int) -> np.ndarray:
        if self._cache is not None and s in self._cache:
            return self._cache[s]
        if self.method == "direct" and self._lu is None:
            self._lu = _factorize(self.system, *self.setup.shifts())
        phi_i, phi_d, st = source_fields(self.grid, self.system, self.setup, s,
                                         self.solver, self.method, self._lu)
        self.calls += 1
        if self.method == "krylov":
            self.stats.append((s, st))
        blk = _block(phi_i, phi_d, self.system.mass_diagonal, self.setup.params.nu)
        if self._cache is not None:
            self._cache[s] = blk
        return blk


def dense_H(provider) -> np.ndarray:
    """Stack every source block (tests and small fixtures only)."""
    return np.vstack([provider(s) for s in range(provider.setup.n_sources)])


def apply_operator(op, x):
    """``op @ x`` for arrays, factor objects (``.matvec``) or plain callables."""
    if hasattr(op, "matvec"):
        return op.matvec(x)
    if callable(op):
        return op(x)
    return op @ x


def forward_measure(op, c, mu, setup: MeasurementSetup) -> np.ndarray:
    """``y = sum_l c_l E_l H mu`` with ``E_l`` the per-measurement extinction of species ``l``."""
    c = np.asarray(c, dtype=float)
    if c.size != setup.table.n_species:
        raise ValueError(f"expected {setup.table.n_species} concentrations, got {c.size}")
    mu = np.asarray(mu, dtype=float)
    Hmu = apply_operator(op, mu)
    if Hmu.shape[0] != setup.n_meas:
        raise ValueError(f"operator returned {Hmu.shape[0]} rows, setup has {setup.n_meas}")
    return (setup.extinction_rows() @ c) * Hmu


def add_noise(y, snr_db, rng=None):
    """Gaussian noise rescaled so that ``20 log10(|y| / |eta|) = snr_db`` exactly.

    Returns ``(y + eta, eta, W)`` with ``W`` the diagonal of the weight matrix,
    ``1 / sigma_m`` for ``sigma_m = |eta| / sqrt(M)``; ``snr_db = inf`` gives
    ``eta = 0`` and unit weights.
    """
    y = np.asarray(y, dtype=float)
    ynorm = np.linalg.norm(y)
    if ynorm == 0:
        raise ValueError("cannot set an SNR for a zero measurement vector")
    if np.isinf(snr_db):
        return y.copy(), np.zeros_like(y), np.ones_like(y)
    rng = np.random.default_rng(rng)
    eta = rng.standard_normal(y.shape)
    eta *= ynorm / (np.linalg.norm(eta) * 10 ** (snr_db / 20))
    sigma_m = np.linalg.norm(eta) / np.sqrt(y.size)
    return y + eta, eta, np.full(y.shape, 1.0 / sigma_m)


_BLOCK_HDR = struct.Struct("<qq")


def write_block(path, block) -> Path:
    """Binary dump: little-endian int64 ``rows, cols`` then row-major f64 payload."""
    block = np.ascontiguousarray(block, dtype="<f8")
    if block.ndim != 2:
        raise ValueError("block must be two-dimensional")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_BLOCK_HDR.pack(*block.shape))
        fh.write(block.tobytes(order="C"))
    return path


def read_block(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    rows, cols = _BLOCK_HDR.unpack_from(raw)
    data = np.frombuffer(raw, dtype="<f8", offset=_BLOCK_HDR.size)
    if data.size != rows * cols:
        raise ValueError(f"{path}: payload has {data.size} values, header says {rows}x{cols}")
    return data.reshape(rows, cols).copy()
