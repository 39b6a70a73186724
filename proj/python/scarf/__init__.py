"""Multi-scene factorized radiance fields with continual learning."""

from ._core import (
    Camera,
    ConflictError,
    ContractError,
    DataError,
    Dataset,
    DimensionError,
    Error,
    LookupError,
    Model,
    NumericalError,
    RunConfig,
    builtin_names,
    composite,
    load_dataset,
    load_model,
    model_from_bytes,
    occupancy,
    oracle_render,
    psnr,
    ssim,
    train_stage,
)

__all__ = [
    "Camera",
    "ConflictError",
    "ContractError",
    "DataError",
    "Dataset",
    "DimensionError",
    "Error",
    "LookupError",
    "Model",
    "NumericalError",
    "RunConfig",
    "builtin_names",
    "composite",
    "load_dataset",
    "load_model",
    "model_from_bytes",
    "occupancy",
    "oracle_render",
    "psnr",
    "ssim",
    "train_stage",
]
