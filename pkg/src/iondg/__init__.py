"""Discontinuous Galerkin simulator for ionic electrodiffusion in
explicitly-resolved intra/extracellular geometries."""

__version__ = "0.1.0"
