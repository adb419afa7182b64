"""Convolutional encoder producing 1/8 (coarse) and 1/2 (fine) feature maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor
from .nn import Conv2d, Module, PWConv


class InputError(ValueError):
    pass


@dataclass
class FeaturePyramid:
    coarse: Tensor  # (..., C_coarse, H/8, W/8)
    fine: Tensor  # (..., C_fine, H/2, W/2)


def _check_divisible(h: int, w: int) -> None:
    if h <= 0 or w <= 0 or h % 8 or w % 8:
        raise InputError(f"image size {h}x{w} is not divisible by 8")


def keypoint_grid(h: int, w: int) -> np.ndarray:
    """Centers of the 8x8 cells, shape (N, 2) as (x, y), row-major.

    Pixel centers sit at integer coordinates, so the block covering pixels
    8c..8c+7 has its center at 8c + 3.5.
    """
    _check_divisible(h, w)
    rows, cols = np.meshgrid(np.arange(h // 8), np.arange(w // 8), indexing="ij")
    return np.stack([8.0 * cols.ravel() + 3.5, 8.0 * rows.ravel() + 3.5], axis=1)


class ResidualStage(Module):
    """Strided 3x3 conv + ReLU, followed by one residual 3x3 conv block."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.down = Conv2d(cin, cout, 3, rng, stride=2)
        self.conv = Conv2d(cout, cout, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = ops.relu(self.down(x))
        return ops.relu(y + self.conv(y))


class Backbone(Module):
    """Three stride-2 stages (1/2, 1/4, 1/8) with top-down fusion back to 1/2."""

    def __init__(self, widths: Sequence[int], coarse_dim: int, fine_dim: int, rng: np.random.Generator):
        c1, c2, c3 = widths
        self.coarse_dim = coarse_dim
        self.fine_dim = fine_dim
        self.stages = [ResidualStage(1, c1, rng), ResidualStage(c1, c2, rng), ResidualStage(c2, c3, rng)]
        self.coarse_head = PWConv(c3, coarse_dim, rng)
        self.lateral = [PWConv(c1, fine_dim, rng), PWConv(c2, fine_dim, rng), PWConv(c3, fine_dim, rng)]
        self.fine_head = Conv2d(fine_dim, fine_dim, 3, rng)

    def forward(self, image: Tensor) -> FeaturePyramid:
        h, w = image.shape[-2:]
        _check_divisible(h, w)
        if image.ndim < 3 or image.shape[-3] != 1:
            raise ShapeError(f"expected a single-channel image (..., 1, H, W), got {image.shape}")
        x1 = self.stages[0](image)
        x2 = self.stages[1](x1)
        x3 = self.stages[2](x2)
        coarse = self.coarse_head(x3)
        top = self.lateral[2](x3)
        top = self.lateral[1](x2) + ops.upsample2x(top)
        top = self.lateral[0](x1) + ops.upsample2x(top)
        fine = self.fine_head(ops.relu(top))
        return FeaturePyramid(coarse=coarse, fine=fine)


def extract_features(image: Tensor, backbone: Backbone) -> FeaturePyramid:
    return backbone(image)
