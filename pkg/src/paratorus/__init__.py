"""Paradifferential calculus and small-divisor solvers on the torus."""

__version__ = "0.1.0"
