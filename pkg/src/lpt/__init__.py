"""Tri-level architecture search in which a learner passes tests that a tester creates."""

__version__ = "0.1.0"

from lpt.autodiff import DifferentiableFn, ParamVector, hvp_exact, value_and_grad
from lpt.config import LptConfig, load_config
from lpt.search_space import CellSpec, Genotype, discretize

__all__ = [
    "CellSpec",
    "DifferentiableFn",
    "Genotype",
    "LptConfig",
    "ParamVector",
    "discretize",
    "hvp_exact",
    "load_config",
    "value_and_grad",
]
