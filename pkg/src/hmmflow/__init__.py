"""Multiscale simulator for immiscible incompressible two-phase flow in porous media.

Upscales a rapidly oscillating permeability through periodic corrector cell
problems, advances the effective two-phase system with a vertex-centered
finite-volume scheme (Kirchhoff/global-pressure or phase-wise upwind form),
and certifies runs with locally computable a posteriori error indicators
that drive adaptive mesh refinement.
"""

__version__ = "0.1.0"
