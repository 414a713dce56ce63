"""Toy sensor backbones: strided 3x3 convolution pyramids for BEV points and camera images."""
import math
from typing import List, Mapping, Tuple

import numpy as np

from gaussfusion.core.ops import conv2d
from gaussfusion.core.params import ParameterStore
from gaussfusion.core.tensor import NumericArray, constant
from gaussfusion.scene.gaussians import SceneBounds
from gaussfusion.scene.sensors import BevFeaturePyramid, ImageFeaturePyramid

KERNEL = 3


class ConvPyramid:
    """``levels`` stride-2 conv + ReLU stages; each stage output is one pyramid level."""

    def __init__(self, store: ParameterStore, path: str, in_channels: int, dim: int, levels: int):
        self.stages: List[Tuple[NumericArray, NumericArray]] = []
        channels = in_channels
        for level in range(levels):
            bound = 1.0 / math.sqrt(channels * KERNEL * KERNEL)
            w = store.uniform(f"{path}.conv{level}.w", (dim, channels, KERNEL, KERNEL), bound)
            b = store.zeros(f"{path}.conv{level}.b", (dim,))
            self.stages.append((w, b))
            channels = dim

    def __call__(self, x) -> List[NumericArray]:
        levels = []
        for w, b in self.stages:
            x = conv2d(x, w, b, stride=2, padding=1).relu()
            levels.append(x)
        return levels


class ToyBackbone:
    """Independent point and image pyramids emitting n_s levels at width d."""

    def __init__(self, store: ParameterStore, dim: int, levels: int = 2, bev_bins: int = 8,
                 image_channels: int = 3, path: str = 'backbone'):
        self.dim = dim
        self.levels = levels
        self.points = ConvPyramid(store, f"{path}.points", bev_bins, dim, levels)
        self.images = ConvPyramid(store, f"{path}.images", image_channels, dim, levels)

    @classmethod
    def from_config(cls, store: ParameterStore, config: Mapping) -> 'ToyBackbone':
        return cls(store, config['gaussians.dim'], config['encoder.levels'], config['backbone.bev_bins'])


def encode_features(sample, backbone: ToyBackbone, bounds: SceneBounds) -> Tuple[BevFeaturePyramid, ImageFeaturePyramid]:
    """Run both pyramids on a SceneSample; deterministic for fixed weights."""
    bev = BevFeaturePyramid(backbone.points(constant(np.asarray(sample.point_bev_raster))), bounds)
    img = ImageFeaturePyramid(backbone.images(constant(np.asarray(sample.camera_rasters))), list(sample.cameras))
    return bev, img
