"""Optimal liquidation in target-zone price models.

Modules:
    model      problem specification, validation, config files
    paths      reflected price paths, local time, transition kernels
    lattice    lattice walks and their local time
    value      value-function solver
    strategy   policy execution and Monte Carlo cost accounting
    branching  particle estimator of the Laplace functional
    cli        command-line driver
"""

__version__ = "0.1.0"
