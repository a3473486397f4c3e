"""Branching flows: variable-length generative flows over branching and deleting elements."""
from .config import RunConfig
from .data import ToyDatasetSpec
from .estimator import BranchingFlows
from .evaluation import EvalReport, evaluate, ks_overlap
from .hazard import HazardSpec
from .latent import Element

__all__ = ["BranchingFlows", "Element", "EvalReport", "HazardSpec", "RunConfig", "ToyDatasetSpec", "evaluate",
           "ks_overlap"]
__version__ = "0.1.0"
