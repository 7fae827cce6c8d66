"""Wavelength-dependent optical coefficients and the solver shifts they induce."""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "SPECIES",
    "BACKGROUND_CONCENTRATIONS",
    "TUMOR_CONCENTRATIONS",
    "ChromophoreTable",
    "OpticalParams",
    "load_table",
    "default_table",
    "diffusion_coefficient",
    "background_absorption",
    "shifts",
    "center_shift_transform",
]

SPECIES = ("HbO2", "HbR", "H2O", "lipid")
# uM, uM, volume fraction, volume fraction
BACKGROUND_CONCENTRATIONS = (17.0, 7.0, 0.15, 0.6)
TUMOR_CONCENTRATIONS = (25.0, 15.0, 0.25, 0.5)


@dataclass(frozen=True)
class ChromophoreTable:
    """Extinction curves sampled on a wavelength list.

    ``extinction[i, l]`` is species ``l`` at ``wavelengths[i]``, scaled so that
    ``extinction @ concentrations`` is an absorption coefficient in 1/cm.
    """

    wavelengths: np.ndarray
    extinction: np.ndarray
    species: tuple[str, ...] = SPECIES
    background: np.ndarray = field(default_factory=lambda: np.array(BACKGROUND_CONCENTRATIONS))
    anomaly: np.ndarray = field(
        default_factory=lambda: np.subtract(TUMOR_CONCENTRATIONS, BACKGROUND_CONCENTRATIONS)
    )

    def __post_init__(self):
        wl = np.asarray(self.wavelengths, dtype=float)
        ext = np.atleast_2d(np.asarray(self.extinction, dtype=float))
        object.__setattr__(self, "wavelengths", wl)
        object.__setattr__(self, "extinction", ext)
        object.__setattr__(self, "species", tuple(self.species))
        object.__setattr__(self, "background", np.asarray(self.background, dtype=float))
        object.__setattr__(self, "anomaly", np.asarray(self.anomaly, dtype=float))
        if ext.shape != (wl.size, len(self.species)):
            raise ValueError(f"extinction shape {ext.shape} != ({wl.size}, {len(self.species)})")
        if wl.size < 1 or np.any(np.diff(wl) <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        if np.any(ext < 0):
            raise ValueError("extinction values must be nonnegative")
        if self.background.size != len(self.species) or self.anomaly.size != len(self.species):
            raise ValueError("concentration vectors must have one entry per species")

    @property
    def n_species(self) -> int:
        return len(self.species)

    def extinction_at(self, lam) -> np.ndarray:
        """Linearly interpolated extinction, shape ``(len(lam), n_species)``."""
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        lo, hi = self.wavelengths[0], self.wavelengths[-1]
        if np.any(lam < lo) or np.any(lam > hi):
            raise ValueError(f"wavelength outside table support [{lo}, {hi}] nm")
        return np.column_stack(
            [np.interp(lam, self.wavelengths, self.extinction[:, l]) for l in range(self.n_species)]
        )

    def with_concentrations(self, background=None, anomaly=None) -> "ChromophoreTable":
        return ChromophoreTable(
            self.wavelengths, self.extinction, self.species,
            self.background if background is None else background,
            self.anomaly if anomaly is None else anomaly,
        )


@dataclass(frozen=True)
class OpticalParams:
    psi: float = 9.4          # scattering prefactor, 1/cm
    b: float = 1.4            # scattering exponent
    lambda0: float = 600.0    # reference wavelength, nm
    nu: float = 2.14e10       # propagation velocity, cm/s
    A: float = 1.0            # Robin (refractive-index mismatch) coefficient

    def __post_init__(self):
        if not self.psi > 0 or not self.lambda0 > 0:
            raise ValueError("psi and lambda0 must be positive")
        if not self.nu > 0 or not self.A > 0:
            raise ValueError("nu and A must be positive")


def load_table(path) -> ChromophoreTable:
    """Read a whitespace table: header ``wavelength <species...>`` then one row per sample."""
    rows, header = [], None
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if header is None:
            header = line.split()
            continue
        rows.append([float(v) for v in line.split()])
    if header is None or not rows:
        raise ValueError(f"{path}: empty chromophore table")
    data = np.array(rows)
    if data.shape[1] != len(header):
        raise ValueError(f"{path}: rows have {data.shape[1]} columns, header has {len(header)}")
    species = tuple(header[1:])
    kw = {}
    if species != SPECIES:
        kw = dict(background=np.zeros(len(species)), anomaly=np.zeros(len(species)))
    return ChromophoreTable(data[:, 0], data[:, 1:], species, **kw)


def default_table() -> ChromophoreTable:
    with resources.as_file(resources.files("hydot") / "data" / "chromophores.txt") as p:
        return load_table(p)


def diffusion_coefficient(lam, params: OpticalParams):
    """Mie-type diffusion ``(nu * psi / 3) * (lam / lambda0) ** b``."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("wavelength must be positive")
    return params.nu * params.psi / 3.0 * (lam / params.lambda0) ** params.b


def background_absorption(lam, table: ChromophoreTable, concentrations=None):
    """``sum_l eps_l(lam) * c_l`` with the table's background concentrations by default."""
    c = table.background if concentrations is None else np.asarray(concentrations, dtype=float)
    mu = table.extinction_at(lam) @ c
    return mu if np.ndim(lam) else float(mu[0])


def shifts(lam, table: ChromophoreTable, params: OpticalParams):
    """Return ``(sigma, sigma_prime)``: ``nu*mu_a/D`` and ``1/(2*A*D)``."""
    D = diffusion_coefficient(lam, params)
    mu_a = background_absorption(lam, table)
    return params.nu * mu_a / D, 1.0 / (2.0 * params.A * D)


def center_shift_transform(sigma_prime):
    """Move the mean Robin shift into the base operator.

    Returns ``(mean, recentered)``; the caller adds ``mean * R`` to ``K``.
    """
    sp_ = np.asarray(sigma_prime, dtype=float)
    if sp_.size == 0:
        raise ValueError("need at least one shift")
    mean = float(np.mean(sp_))
    return mean, sp_ - mean
