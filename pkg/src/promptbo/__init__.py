"""Bayesian optimization of text-classification prompts with a GP surrogate."""

__version__ = "0.1.0"

from .acquisition import AcquisitionConfig, ei, kappa_schedule, select, ucb
from .annotator import (BackendConfig, HTTPBackend, Prompt, SimulatedBackend, SimulatedOracle,
                        extract_label, make_backend)
from .dataset import Example, Partition, parse_ethos, parse_liar, partition
from .expansion import ExpansionConfig, expand
from .optimizer import PromptSearch, RunConfig, Trajectory, run, update_seeds
from .scorer import (EvalCache, Observation, PredictionVector, Scorer, clarification_score,
                     detect_label_reversal)
from .surrogate import KernelParams, PredictionVectorGP, fit, posterior

__all__ = [
    "AcquisitionConfig", "BackendConfig", "EvalCache", "Example", "ExpansionConfig", "HTTPBackend",
    "KernelParams", "Observation", "Partition", "PredictionVector", "PredictionVectorGP", "Prompt",
    "PromptSearch", "RunConfig", "Scorer", "SimulatedBackend", "SimulatedOracle", "Trajectory",
    "clarification_score", "detect_label_reversal", "ei", "expand", "extract_label", "fit",
    "kappa_schedule", "make_backend", "parse_ethos", "parse_liar", "partition", "posterior", "run",
    "select", "ucb", "update_seeds",
]
