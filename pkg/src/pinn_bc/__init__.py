"""Boundary-condition enforcement for physics-informed and variational neural PDE solvers.

Modules: ``adf`` (distance functions and boundary extensions), ``mesh``/``fem``
(meshes, quadrature, Lagrange spaces), ``nn`` (networks and derivatives),
``optim`` (ADAM then quasi-Newton), ``residuals`` (PINN/VPINN losses for each
boundary method), ``problems`` (benchmark catalog) and ``harness``/``cli``
(experiments, oracle, studies, export).
"""

from .errors import ConfigurationError, NumericalFailure, OutOfDomainError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "NumericalFailure", "OutOfDomainError", "__version__"]
