"""Action-guided attention for next-action anticipation, on a small numpy autodiff engine."""

from .model import AgaConfig, AgaModel
from .train import TrainConfig, train, evaluate
from .data import default_task, history_task, generate_dataset

__all__ = ["AgaConfig", "AgaModel", "TrainConfig", "train", "evaluate", "default_task", "history_task", "generate_dataset"]
__version__ = "0.1.0"
