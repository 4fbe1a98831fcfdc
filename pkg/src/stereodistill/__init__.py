"""Stereo-trained self-supervised monocular depth estimation with
offset-aligned multi-scale feature aggregation and a self-distillation
training phase."""

__version__ = "0.1.0"

from .aggregation import DISTILLED, RAW, OffsetFusionBlock, offset_norm_stats, switch_offset
from .geometry import (
    CameraRig,
    DisparityLevels,
    DisparityLogitVolume,
    bilinear_sample,
    disparity_to_depth,
    quantize_disparities,
    refine,
    reproject_left,
    synthesize_right,
    volume_to_disparity,
)
from .network import BackboneSpec, DepthNet, DepthNetOutputs
