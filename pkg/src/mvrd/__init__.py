"""Multi-view reasoning distillation for multimodal fake news detection,
at desk scale: a student with text/image/cross attention views, residual
calibration against teacher reasoning embeddings, cross-attention fusion,
and a training/ablation harness on synthetic or file-ingested features.
"""

from .config import ConfigError, TrainConfig
from .datasynth import Sample, SyntheticConfig, generate_dataset, split
from .diffcore import (
    ContractError,
    DimensionError,
    ParameterError,
    Tensor,
    ValidationError,
    backward,
    grad_check,
    no_grad,
)
from .metrics import Metrics, welch_ttest
from .model import Model
from .trainer import (
    Adam,
    RunReport,
    ablation_suite,
    evaluate,
    load_model,
    save_checkpoint,
    sweep,
    train,
)

__version__ = "0.1.0"
