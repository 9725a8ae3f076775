"""Exact Bayesian inference of rate constants in stochastic kinetic models.

Particle marginal Metropolis-Hastings accelerated by a linear-noise surrogate:
delayed acceptance screening, surrogate-gradient MALA proposals, bridge
proposals inside the bootstrap particle filter, and correlated pseudo-marginal
likelihood estimates.
"""

from ._backend import backend_name, set_backend
from .bridge import BridgeKind
from .network import ReactionNetwork, builtin, parse_model_file
from .simulate import Dataset, ObservationModel, eyam_dataset

__version__ = "0.1.0"

__all__ = [
    "BridgeKind", "Dataset", "ObservationModel", "ReactionNetwork",
    "backend_name", "builtin", "eyam_dataset", "parse_model_file",
    "set_backend", "__version__",
]
