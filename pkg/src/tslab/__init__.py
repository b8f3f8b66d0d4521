"""Numerical lab for the pressureless Navier-Stokes-Poisson system on the torus."""

from .spectral import FluidState, SpectralField, TorusGrid

__all__ = ["TorusGrid", "SpectralField", "FluidState"]
__version__ = "0.1.0"
