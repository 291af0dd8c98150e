"""Numerical workbench for mean field games driven by Levy diffusions.

Spectral heat kernels for Levy generators, mild-solution HJB and
Fokker-Planck solvers on periodic boxes, the coupled MFG fixed point, the
linearized forward-backward system giving the measure derivative of the
value function, and consistency checks for the associated master field.
"""

from .grid import Field, Grid

__all__ = ["Field", "Grid"]
__version__ = "0.1.0"
