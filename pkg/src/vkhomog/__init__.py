"""Numerical laboratory for homogenized, dimension-reduced von Karman plates.

Core pipeline: microstructured quadratic densities -> corrector energies on
extruded rasters -> effective density by extrapolation and polarization ->
limit plate minimization, plus the thin-domain displacement decomposition
as a diagnostic toolkit.
"""

__version__ = "0.1.0"
