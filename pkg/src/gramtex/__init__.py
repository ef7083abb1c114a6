"""Gram-matrix texture engine.

Texture losses over deep feature correlations, iterative texture transfer,
feed-forward super-resolution trained with those losses, and a texture-based
perceptual metric with a two-alternative forced-choice evaluation harness.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    FormatError,
    GeometryError,
    GramtexError,
    SizeError,
    ValidationError,
)
from .extractor import DEFAULT_LOSS_TAPS, Extractor, LayerSpec, NetworkSpec, vgg19_spec
from .generator import (
    Generator,
    GeneratorConfig,
    TrainState,
    begin_texture_phase,
    build_generator,
    make_train_state,
    parameter_count,
    shallow_config,
    train_step,
)
from .imaging import (
    ImageBuffer,
    LabelMap,
    bicubic_downsample,
    bicubic_resize,
    bicubic_upsample,
    build_mask_set,
    center_crop,
    read_image,
    read_label_map,
    write_image,
    write_label_map,
)
from .metric import (
    MetricConfig,
    Triplet,
    default_metric_taps,
    eval_2afc,
    gram_distance,
    image_distance,
    load_manifest,
    normalize_features,
    normalized_gram,
    tile_patches,
)
from .tensor import AdamState, Tape, Tensor, adam_step, backward
from .texture import (
    GramMatrix,
    LossConfig,
    MaskSet,
    apply_masks,
    gram,
    mse_loss,
    semantic_texture_loss,
    texture_loss,
)
from .transfer import TransferConfig, TransferReport, optimize_image, sr_refine
from .twf import read_tensors, write_tensors

__all__ = [
    "__version__",
    "GramtexError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "FormatError",
    "GeometryError",
    "SizeError",
    "ValidationError",
    "Tensor",
    "Tape",
    "AdamState",
    "adam_step",
    "backward",
    "read_tensors",
    "write_tensors",
    "LayerSpec",
    "NetworkSpec",
    "Extractor",
    "vgg19_spec",
    "DEFAULT_LOSS_TAPS",
    "GramMatrix",
    "LossConfig",
    "MaskSet",
    "gram",
    "apply_masks",
    "texture_loss",
    "semantic_texture_loss",
    "mse_loss",
    "ImageBuffer",
    "LabelMap",
    "read_image",
    "write_image",
    "read_label_map",
    "write_label_map",
    "bicubic_resize",
    "bicubic_upsample",
    "bicubic_downsample",
    "center_crop",
    "build_mask_set",
    "Generator",
    "GeneratorConfig",
    "TrainState",
    "build_generator",
    "shallow_config",
    "parameter_count",
    "make_train_state",
    "begin_texture_phase",
    "train_step",
    "TransferConfig",
    "TransferReport",
    "optimize_image",
    "sr_refine",
    "MetricConfig",
    "Triplet",
    "default_metric_taps",
    "normalize_features",
    "normalized_gram",
    "gram_distance",
    "image_distance",
    "tile_patches",
    "load_manifest",
    "eval_2afc",
]
