"""Hetero-modal segmentation: per-modality convolutional back ends fused by
their mean and variance, so any non-empty subset of input images can be
segmented by one network."""

from .model import (MODALITY_NAMES, HemisConfig, HemisParams, ModalityMask, all_subsets, fuse,
                    init_params, load_model, model_forward, save_model, segment)
from .tensor import make_rng

__version__ = "0.1.0"

__all__ = ["MODALITY_NAMES", "HemisConfig", "HemisParams", "ModalityMask", "all_subsets", "fuse",
           "init_params", "load_model", "make_rng", "model_forward", "save_model", "segment"]
