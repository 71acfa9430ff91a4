"""Domain-generalised vessel segmentation with spectral modulation, prototype fusion and mask-prompt refinement."""

from .config import ExperimentConfig, derive_seed, desk_config, load_config
from .encoder import EncoderConfig, ImageEncoder
from .fadf import FrequencyPrototype, DomainWeights, fusion_weights, infer_fused
from .hmpr import HierarchicalRefiner
from .losses import LossConfig, metrics, total_loss
from .model import ModelConfig, ModuleFlags, SegmentationModel
from .sdm import SpectralDomainModulator, dwt_reference

__version__ = "0.1.0"

__all__ = [
    "DomainWeights", "EncoderConfig", "ExperimentConfig", "FrequencyPrototype",
    "HierarchicalRefiner", "ImageEncoder", "LossConfig", "ModelConfig", "ModuleFlags",
    "SegmentationModel", "SpectralDomainModulator", "derive_seed", "desk_config",
    "dwt_reference", "fusion_weights", "infer_fused", "load_config", "metrics", "total_loss",
]
