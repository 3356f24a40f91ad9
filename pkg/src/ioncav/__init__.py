"""Single ion in a two-mode optical cavity: Lindblad and quantum-trajectory simulation.

Subpackages: :mod:`ioncav.hilbert`, :mod:`ioncav.model`, :mod:`ioncav.solver`,
:mod:`ioncav.observables`, :mod:`ioncav.budget` and :mod:`ioncav.experiments`.
"""

from .hilbert import ConfigurationError
from .solver import BACKEND

__version__ = "0.1.0"

__all__ = ["__version__", "BACKEND", "ConfigurationError"]
