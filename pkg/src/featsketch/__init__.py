"""Sketch extraction from the intermediate features of a frozen style-based generator."""

from .errors import (
    AdapterError,
    ConfigError,
    DataError,
    DegeneracyError,
    DimensionError,
    FeatsketchError,
    IntegrityError,
    NumericError,
    ParsingError,
    ScheduleError,
    TrainingAborted,
    ValidationError,
)
from .fusion import AblationFlags, SketchGenerator, build_generator, fuse_step, generate_sketch, spatial_attention
from .generator_tap import (
    FeaturePyramid,
    FeatureSchedule,
    GeneratorHandle,
    InverterConfig,
    LatentCode,
    build_toy_generator,
    default_schedule,
    hijack_features,
    invert_image,
    toy_schedule,
    validate_schedule,
)
from .losses import LossWeights, adversarial_losses, clip_loss, joint_augment, perceptual_loss, recon_loss, total_objective
from .trainer import TrainConfig, stage_weights, train

__version__ = "0.1.0"
