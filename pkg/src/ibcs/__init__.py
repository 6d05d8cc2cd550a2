"""Numerical toolkit for a reduced pairing model in an imaginary magnetic field.

Subpackages cover the lattice model catalog, Brillouin-zone quadrature,
the gap equation, thermodynamic observables, phase-boundary tracing,
the free covariance with its multi-scale decomposition, a desk-scale
Grassmann-Gaussian engine, and an exact-diagonalization oracle.
"""

__version__ = "0.1.0"
