"""Regular hexahedral slab phantom and trilinear finite-element matrices.

Vertices are numbered x-fastest: ``n = ix + nx * (iy + ny * iz)``.  The box is
``[-Lx, Lx] x [-Ly, Ly] x [0, Lz]`` (cm).  The two flat plates ``z = 0`` and
``z = Lz`` carry the Robin condition; every other boundary vertex is Dirichlet.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Grid",
    "SystemMatrices",
    "build_grid",
    "assemble_stiffness",
    "assemble_mass",
    "assemble_robin",
    "assemble_system",
    "eliminate_dirichlet",
    "point_source_vector",
    "write_vtk",
    "read_vtk",
]


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    nz: int
    Lx: float
    Ly: float
    Lz: float
    spacing: tuple[float, float, float] = field(init=False)

    def __post_init__(self):
        h = (2 * self.Lx / (self.nx - 1), 2 * self.Ly / (self.ny - 1), self.Lz / (self.nz - 1))
        object.__setattr__(self, "spacing", h)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def N(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def origin(self) -> tuple[float, float, float]:
        return (-self.Lx, -self.Ly, 0.0)

    @property
    def volume(self) -> float:
        return 4.0 * self.Lx * self.Ly * self.Lz

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            np.linspace(-self.Lx, self.Lx, self.nx),
            np.linspace(-self.Ly, self.Ly, self.ny),
            np.linspace(0.0, self.Lz, self.nz),
        )

    def coordinates(self) -> np.ndarray:
        """Vertex coordinates, shape ``(N, 3)`` in x-fastest order."""
        x, y, z = self.axes()
        Z, Y, X = np.meshgrid(z, y, x, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def index(self, ix, iy, iz):
        return ix + self.nx * (iy + self.ny * iz)

    def dirichlet_mask(self) -> np.ndarray:
        ix, iy, _ = self._ijk()
        return (ix == 0) | (ix == self.nx - 1) | (iy == 0) | (iy == self.ny - 1)

    def robin_mask(self) -> np.ndarray:
        """Vertices on the z=0 or z=Lz plates (including their Dirichlet rims)."""
        _, _, iz = self._ijk()
        return (iz == 0) | (iz == self.nz - 1)

    def face_labels(self) -> dict[str, str]:
        return {
            "x-": "dirichlet", "x+": "dirichlet",
            "y-": "dirichlet", "y+": "dirichlet",
            "z-": "robin", "z+": "robin",
        }

    def contains(self, r) -> bool:
        r = np.asarray(r, dtype=float)
        tol = 1e-12 * max(self.Lx, self.Ly, self.Lz)
        return bool(
            abs(r[0]) <= self.Lx + tol and abs(r[1]) <= self.Ly + tol
            and -tol <= r[2] <= self.Lz + tol
        )

    def _ijk(self):
        n = np.arange(self.N)
        return n % self.nx, (n // self.nx) % self.ny, n // (self.nx * self.ny)

    def cell_vertices(self) -> np.ndarray:
        """Global indices of the 8 vertices of every cell, local order x-fastest."""
        nx, ny, nz = self.shape
        cx, cy, cz = np.meshgrid(
            np.arange(nx - 1), np.arange(ny - 1), np.arange(nz - 1), indexing="ij"
        )
        base = self.index(cx.ravel(order="F"), cy.ravel(order="F"), cz.ravel(order="F"))
        offsets = np.array(
            [a + nx * (b + ny * c) for c in (0, 1) for b in (0, 1) for a in (0, 1)]
        )
        return base[:, None] + offsets[None, :]


def build_grid(nx: int, ny: int, nz: int, Lx: float, Ly: float, Lz: float) -> Grid:
    counts = (nx, ny, nz)
    if any(int(c) != c or c < 2 for c in counts):
        raise ValueError(f"vertex counts must be integers >= 2, got {counts}")
    if not all(np.isfinite(e) and e > 0 for e in (Lx, Ly, Lz)):
        raise ValueError(f"extents must be positive, got {(Lx, Ly, Lz)}")
    return Grid(int(nx), int(ny), int(nz), float(Lx), float(Ly), float(Lz))


def _k1(h):
    return np.array([[1.0, -1.0], [-1.0, 1.0]]) / h


def _m1(h):
    return np.array([[2.0, 1.0], [1.0, 2.0]]) * h / 6.0


def element_stiffness(hx: float, hy: float, hz: float) -> np.ndarray:
    """8x8 trilinear hexahedron stiffness (exact tensor-product form)."""
    return (
        np.kron(_m1(hz), np.kron(_m1(hy), _k1(hx)))
        + np.kron(_m1(hz), np.kron(_k1(hy), _m1(hx)))
        + np.kron(_k1(hz), np.kron(_m1(hy), _m1(hx)))
    )


def element_mass(hx: float, hy: float, hz: float) -> np.ndarray:
    return np.kron(_m1(hz), np.kron(_m1(hy), _m1(hx)))


def face_mass(hx: float, hy: float) -> np.ndarray:
    """4x4 bilinear quadrilateral mass matrix."""
    return np.kron(_m1(hy), _m1(hx))


def _assemble(grid: Grid, Ke: np.ndarray) -> sp.csr_matrix:
    cells = grid.cell_vertices()
    rows = np.repeat(cells, 8, axis=1).ravel()
    cols = np.tile(cells, (1, 8)).ravel()
    vals = np.tile(Ke.ravel(), cells.shape[0])
    A = sp.coo_matrix((vals, (rows, cols)), shape=(grid.N, grid.N)).tocsr()
    A.sum_duplicates()
    return A


def eliminate_dirichlet(A: sp.spmatrix, mask: np.ndarray, diag: float | None = 1.0) -> sp.csr_matrix:
    """Zero Dirichlet rows and columns; put ``diag`` on their diagonal (or leave zero)."""
    keep = sp.diags((~mask).astype(float))
    out = (keep @ A @ keep).tocsr()
    if diag is not None:
        out = out + sp.diags(mask.astype(float) * diag)
    out = out.tocsr()
    out.eliminate_zeros()
    return out


def assemble_stiffness(grid: Grid, dirichlet: bool = True) -> sp.csr_matrix:
    K = _assemble(grid, element_stiffness(*grid.spacing))
    if dirichlet:
        K = eliminate_dirichlet(K, grid.dirichlet_mask(), 1.0)
    return K


def assemble_mass(grid: Grid, lumped: bool = True) -> sp.csr_matrix:
    M = _assemble(grid, element_mass(*grid.spacing))
    if lumped:
        return sp.diags(np.asarray(M.sum(axis=1)).ravel()).tocsr()
    return M


def assemble_robin(grid: Grid) -> sp.csr_matrix:
    """Surface mass on the two Robin plates; rows of all other vertices are zero."""
    nx, ny, nz = grid.shape
    hx, hy, _ = grid.spacing
    cx, cy = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    cx, cy = cx.ravel(), cy.ravel()
    offs = np.array([a + nx * b for b in (0, 1) for a in (0, 1)])
    Fe = face_mass(hx, hy)
    rows, cols, vals = [], [], []
    for iz in (0, nz - 1):
        quads = grid.index(cx, cy, iz)[:, None] + offs[None, :]
        rows.append(np.repeat(quads, 4, axis=1).ravel())
        cols.append(np.tile(quads, (1, 4)).ravel())
        vals.append(np.tile(Fe.ravel(), quads.shape[0]))
    R = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.N, grid.N),
    ).tocsr()
    R.sum_duplicates()
    return R


@dataclass(frozen=True)
class SystemMatrices:
    """Dirichlet-eliminated K and R with the lumped (untouched) mass diagonal."""

    K: sp.csr_matrix
    M: sp.csr_matrix
    R: sp.csr_matrix
    dirichlet: np.ndarray

    @property
    def mass_diagonal(self) -> np.ndarray:
        return self.M.diagonal()

    def restrict(self, b: np.ndarray) -> np.ndarray:
        """Zero the Dirichlet entries of a load vector."""
        b = np.array(b, dtype=float, copy=True)
        b[..., self.dirichlet] = 0.0
        return b


def assemble_system(grid: Grid) -> SystemMatrices:
    mask = grid.dirichlet_mask()
    K = assemble_stiffness(grid, dirichlet=True)
    M = assemble_mass(grid, lumped=True)
    R = eliminate_dirichlet(assemble_robin(grid), mask, diag=None)
    return SystemMatrices(K=K, M=M, R=R, dirichlet=mask)


def _locate(grid: Grid, r) -> tuple[np.ndarray, np.ndarray]:
    """Containing cell (lower corner indices) and local coordinates in [0, 1]."""
    r = np.asarray(r, dtype=float)
    lo = np.array(grid.origin)
    h = np.array(grid.spacing)
    n = np.array(grid.shape)
    s = (r - lo) / h
    cell = np.clip(np.floor(s).astype(int), 0, n - 2)
    t = np.clip(s - cell, 0.0, 1.0)
    return cell, t


def point_source_vector(grid: Grid, r) -> np.ndarray:
    """Nodal values ``u_j(r)``: multilinear weights of the cell containing ``r``."""
    if not grid.contains(r):
        raise ValueError(f"point {tuple(np.asarray(r))} is outside the grid box")
    (cx, cy, cz), (tx, ty, tz) = _locate(grid, r)
    b = np.zeros(grid.N)
    for c in (0, 1):
        for bb in (0, 1):
            for a in (0, 1):
                w = (tx if a else 1 - tx) * (ty if bb else 1 - ty) * (tz if c else 1 - tz)
                b[grid.index(cx + a, cy + bb, cz + c)] += w
    return b


def write_vtk(path, grid: Grid, fields: dict[str, np.ndarray], title: str = "hydot") -> Path:
    """Legacy-VTK ASCII structured points, one scalar per vertex per field."""
    path = Path(path)
    lines = [
        "# vtk DataFile Version 3.0",
        title[:255],
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        "DIMENSIONS {} {} {}".format(*grid.shape),
        "ORIGIN {:.17g} {:.17g} {:.17g}".format(*grid.origin),
        "SPACING {:.17g} {:.17g} {:.17g}".format(*grid.spacing),
        f"POINT_DATA {grid.N}",
    ]
    for name, values in fields.items():
        values = np.asarray(values, dtype=float).ravel()
        if values.size != grid.N:
            raise ValueError(f"field {name!r} has {values.size} values, grid has {grid.N}")
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(f"{v:.10g}" for v in values)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_vtk(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a file written by :func:`write_vtk` (header dict, fields)."""
    tokens = Path(path).read_text().split("\n")
    header: dict = {}
    fields: dict[str, np.ndarray] = {}
    i = 0
    while i < len(tokens):
        line = tokens[i].strip()
        if line.startswith("DIMENSIONS"):
            header["dimensions"] = tuple(int(v) for v in line.split()[1:])
        elif line.startswith("ORIGIN"):
            header["origin"] = tuple(float(v) for v in line.split()[1:])
        elif line.startswith("SPACING"):
            header["spacing"] = tuple(float(v) for v in line.split()[1:])
        elif line.startswith("POINT_DATA"):
            header["n"] = int(line.split()[1])
        elif line.startswith("SCALARS"):
            name = line.split()[1]
            n = header["n"]
            fields[name] = np.array([float(v) for v in tokens[i + 2:i + 2 + n]])
            i += 1 + n
        i += 1
    return header, fields
