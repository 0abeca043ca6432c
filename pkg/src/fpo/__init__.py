"""Flow policy optimization: flow-matching policies trained with a PPO-style clipped surrogate."""

from .autodiff import NonFiniteError, Tape, Tensor
from .config import RunConfig, load_config
from .harness import evaluate, load_checkpoint, probe_multimodality, sweep, train

__all__ = ["NonFiniteError", "Tape", "Tensor", "RunConfig", "load_config", "evaluate",
           "load_checkpoint", "probe_multimodality", "sweep", "train"]
__version__ = "0.1.0"
