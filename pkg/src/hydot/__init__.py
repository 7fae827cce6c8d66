"""Hyperspectral diffuse optical tomography at desk scale.

Submodules: :mod:`grid` (FE assembly), :mod:`optics` (wavelength coefficients),
:mod:`krylov` (recycled shifted solves), :mod:`born` (fields and sensitivity),
:mod:`lowrank` (recursive compression), :mod:`pals` (shape reconstruction) and
:mod:`harness` (experiments and CLI plumbing).
"""

__version__ = "0.1.0"
