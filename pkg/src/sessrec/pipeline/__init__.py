"""Training and evaluation orchestration for the A-G configuration ladder."""

from .augment import all_session_permutations, permute_batch, predict_tta, shuffle_within_sessions
from .config import LETTERS, RunConfig, load_run_config
from .metrics import categorization_accuracy, refine, refine_array
from .train import Checkpoint, EvalReport, NumericalError, ablate, evaluate, predict, train

__all__ = [
    "Checkpoint", "EvalReport", "LETTERS", "NumericalError", "RunConfig", "ablate",
    "all_session_permutations", "categorization_accuracy", "evaluate", "load_run_config",
    "permute_batch", "predict", "predict_tta", "refine", "refine_array",
    "shuffle_within_sessions", "train",
]
