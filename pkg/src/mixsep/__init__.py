"""Mix-and-separate audio-visual alignment on a synthetic world.

Modules: ``diffmath`` (reverse-mode arrays), ``synthworld`` (data),
``model`` (encoders and aligners), ``simvol`` (similarity volumes),
``objectives`` (losses), ``trainer``, ``evalsuite`` and ``cli``.
"""

from .diffmath import Tensor, finite_diff_check
from .evalsuite import MetricsReport
from .model import SOUND_HEAD, SPEECH_HEAD, MixSepModel, ModelConfig
from .objectives import LossWeights, total_loss
from .synthworld import WorldConfig, make_datasets
from .trainer import TrainConfig, Trainer

__all__ = ["Tensor", "finite_diff_check", "MetricsReport", "SOUND_HEAD", "SPEECH_HEAD", "MixSepModel",
           "ModelConfig", "LossWeights", "total_loss", "WorldConfig", "make_datasets", "TrainConfig", "Trainer"]
__version__ = "0.1.0"
