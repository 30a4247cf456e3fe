"""Minimax bridge-function estimators for off-policy evaluation and learning in
confounded partially observable environments with continuous actions."""
from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .data import Dataset, load_dataset, split_kfold, to_transition_tuples, write_dataset
from .environment import ConfoundedEnvSpec, rollout, true_policy_value
from .ope import EstimatorConfig, Mode, SgdConfig, evaluate_policy, fit_q, ustat_loss
from .opl import LearnerConfig, default_learner, learn_policy
from .policy import PolicyClass, PolicyParams

__all__ = [
    "ConfoundedEnvSpec", "Dataset", "EstimatorConfig", "LearnerConfig", "Mode", "PolicyClass",
    "PolicyParams", "SgdConfig", "default_learner", "evaluate_policy", "fit_q", "learn_policy",
    "load_dataset", "rollout", "split_kfold", "to_transition_tuples", "true_policy_value",
    "ustat_loss", "write_dataset", "__version__",
]
