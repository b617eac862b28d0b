from .checkpoint import load_tensors, save_tensors
from .flow import (
    BatchedConditions,
    ConditionSet,
    GuidanceScales,
    apply_condition_dropout,
    cfg_combine,
    collate_conditions,
    complete_first_state,
    flow_loss,
    sample_chunk,
)
from .network import FULL_SCALE_REFERENCE, Denoiser, DenoiserConfig
from .training import (
    build_condition,
    load_generator,
    sample_to_slabs,
    save_generator,
    spatial_to_slab,
    train_generator,
)

__all__ = [
    "BatchedConditions",
    "ConditionSet",
    "Denoiser",
    "DenoiserConfig",
    "FULL_SCALE_REFERENCE",
    "GuidanceScales",
    "apply_condition_dropout",
    "build_condition",
    "cfg_combine",
    "collate_conditions",
    "complete_first_state",
    "flow_loss",
    "load_generator",
    "load_tensors",
    "sample_chunk",
    "sample_to_slabs",
    "save_generator",
    "save_tensors",
    "spatial_to_slab",
    "train_generator",
]
