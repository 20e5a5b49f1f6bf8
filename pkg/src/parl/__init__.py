"""Ensembles trained with a pairwise gradient-similarity penalty, plus attacks and CKA diagnostics."""

from . import attacks, autodiff, data, diversity, ensemble, harness, loss, nn, training
from .attacks import AttackSpec
from .ensemble import Ensemble, evaluate, majority_vote
from .estimator import ParlEnsembleClassifier
from .exceptions import ConfigError, ContractViolation, NumericalFault, ParseError, VersionError
from .loss import ParlConfig, parl_objective, parl_train_step, penalty
from .training import train_ensemble

__all__ = [
    "attacks", "autodiff", "data", "diversity", "ensemble", "harness", "loss", "nn", "training",
    "AttackSpec", "Ensemble", "evaluate", "majority_vote", "ParlEnsembleClassifier",
    "ConfigError", "ContractViolation", "NumericalFault", "ParseError", "VersionError",
    "ParlConfig", "parl_objective", "parl_train_step", "penalty", "train_ensemble",
]
__version__ = "0.1.0"
