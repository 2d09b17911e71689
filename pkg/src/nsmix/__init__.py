"""Damped stochastic Navier-Stokes on a large periodic box: solvers, weighted
energy ledgers, Girsanov coupling and mixing diagnostics."""

__version__ = "0.1.0"
