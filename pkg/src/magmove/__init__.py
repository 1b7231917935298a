"""Minimizing-movements simulator for compressible magnetoelastic solids."""
__version__ = "0.1.0"
