"""Per-sperm DNA-fragmentation prediction from unstained microscopy images.

Two branches feed a small MLP: hand-crafted head morphometrics and a
compact hierarchical vision transformer trained end to end.  See the CLI
(`fragpredict --help`) for the full pipeline: synth, extract-features,
train, eval, predict.
"""

__version__ = "0.1.0"

from .backbone import BackboneConfig, ParamStore, init_params
from .data import DatasetManifest, SampleRecord, SynthConfig, load_manifest, patient_split, synth_generate
from .errors import FragPredictError
from .evaluation import classification_report, micro_average_roc, roc_curve
from .fusion import EnsembleModel, LabelRule, TrainConfig, predict, train
from .imaging import GrayImage, load_image, segment_head, to_grayscale, trinarize
from .morphometry import MorphFeatures, WhoFlags, extract_features, who_flags

__all__ = [
    "__version__",
    "BackboneConfig",
    "ParamStore",
    "init_params",
    "DatasetManifest",
    "SampleRecord",
    "SynthConfig",
    "load_manifest",
    "patient_split",
    "synth_generate",
    "FragPredictError",
    "classification_report",
    "micro_average_roc",
    "roc_curve",
    "EnsembleModel",
    "LabelRule",
    "TrainConfig",
    "predict",
    "train",
    "GrayImage",
    "load_image",
    "segment_head",
    "to_grayscale",
    "trinarize",
    "MorphFeatures",
    "WhoFlags",
    "extract_features",
    "who_flags",
]
