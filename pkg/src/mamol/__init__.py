"""Missing-aware mixture of LoRA experts for multimodal classification.

A small numpy autodiff core (:mod:`mamol.numcore`), a synthetic multimodal
data generator with missing-modality protocols (:mod:`mamol.datagen`), a
frozen transformer trunk (:mod:`mamol.backbone`), the expert modules
(:mod:`mamol.mamol`, :mod:`mamol.baselines`), training (:mod:`mamol.trainer`),
metrics and experiment harnesses (:mod:`mamol.evalkit`) and a CLI.
"""

from .config import ModelConfig, RunConfig, TrainConfig, load_config
from .datagen import MissingPattern, MultimodalDataset, SyntheticSpec, generate_synthetic
from .model import MultimodalClassifier, build_model

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "MissingPattern",
    "MultimodalClassifier",
    "MultimodalDataset",
    "RunConfig",
    "SyntheticSpec",
    "TrainConfig",
    "build_model",
    "generate_synthetic",
    "load_config",
]
