"""Gaussian map: representation, seeding, optimisation and density control."""

from .model import (
    CHECKPOINT_MAGIC,
    Gaussian3D,
    GaussianMap,
    covariance_world,
    load_checkpoint,
    logit,
    save_checkpoint,
    sigmoid,
)
from .mapping import (
    DensifyStats,
    MappingConfig,
    SeedConfig,
    adam_step,
    densify_and_prune,
    map_loss,
    optimize_map,
    seed_from_frame,
)
