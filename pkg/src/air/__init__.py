"""Two-state shared-weight recurrent Transformer testbed.

One shared core performs both update types of the recurrence; the encoded
input is injected only into one of them by default, and the package
provides the training recipe, rollout tracing, freeze experiments, and
attention statistics for studying the resulting state specialization.
"""

from . import tensor
from .model import AirModel, ModelConfig, load_checkpoint, save_checkpoint
from .recurrence import RecurrenceConfig, RolloutTrace, run_rollout, single_state_rollout
from .training import TrainConfig, train, evaluate_exact_match
from .manifest import ExperimentManifest, load_manifest

__version__ = "0.1.0"

__all__ = [
    "tensor",
    "AirModel",
    "ModelConfig",
    "load_checkpoint",
    "save_checkpoint",
    "RecurrenceConfig",
    "RolloutTrace",
    "run_rollout",
    "single_state_rollout",
    "TrainConfig",
    "train",
    "evaluate_exact_match",
    "ExperimentManifest",
    "load_manifest",
    "__version__",
]
