"""slidemil: weakly-supervised whole-slide image classification.

Slides are bags of patch features; labels exist only at the slide level.
The package covers the full pipeline: tissue segmentation and patch
extraction, pluggable patch encoders, attention-based bag classifiers
(CLAM single/multi-branch and a Nystrom-attention transformer), training
with seed-level reproducibility, evaluation across seed sweeps, and
attention heatmap export.
"""

from .attnmil import ClamConfig, ClamModel
from .bagio import (
    DatasetIndex,
    FeatureBag,
    PatchManifest,
    SlideRecord,
    SplitSpec,
    SyntheticSpec,
    build_index,
    generate_synthetic,
    make_split,
    read_feature_bag,
    write_feature_bag,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .encode import default_spec, load_encoder, register_encoder
from .errors import SlideMilError
from .evalx import accuracy, aggregate, auc, confidence
from .runner import ExperimentPlan, export_heatmap, run_sweep
from .train import TrainConfig, train_model
from .transmil import TransmilConfig, TransmilModel, nystrom_attention

__version__ = "0.1.0"

__all__ = [
    "ClamConfig", "ClamModel", "TransmilConfig", "TransmilModel",
    "DatasetIndex", "FeatureBag", "PatchManifest", "SlideRecord",
    "SplitSpec", "SyntheticSpec", "build_index", "generate_synthetic",
    "make_split", "read_feature_bag", "write_feature_bag",
    "load_checkpoint", "save_checkpoint", "default_spec", "load_encoder",
    "register_encoder", "SlideMilError", "accuracy", "aggregate", "auc",
    "confidence", "ExperimentPlan", "export_heatmap", "run_sweep",
    "TrainConfig", "train_model", "nystrom_attention", "__version__",
]
