"""Axis-wise learned position encoding and the sinusoidal baseline.

The learned encoder embeds the column ramp ``0..W8-1`` and the row ramp
``0..H8-1`` with two independent position-wise two-layer maps (1-D
convolutions of kernel size 1), then broadcasts their sum over the grid, so
the map is additively separable: ``pos[c, y, x] = fy[c, y] + fx[c, x]``.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor
from .nn import Linear, Module


class AxisEncoder(Module):
    """Conv1d(1->C, k=1) -> ReLU -> Conv1d(C->C, k=1) over a coordinate ramp."""

    def __init__(self, dim: int, rng: np.random.Generator, normalize: bool = False):
        self.normalize = normalize
        self.inner = Linear(1, dim, rng)
        self.outer = Linear(dim, dim, rng)

    def ramp(self, length: int) -> Tensor:
        coords = np.arange(length, dtype=np.float64)
        if self.normalize and length > 1:
            coords = coords / (length - 1)
        return Tensor(coords.reshape(length, 1))

    def forward(self, length: int) -> Tensor:
        """Embedding of shape (C, length)."""
        if length < 1:
            raise ShapeError("axis length must be >= 1")
        h = ops.relu(self.inner(self.ramp(length)))
        return ops.swapaxes(self.outer(h), 0, 1)


def encode_axis(length: int, encoder: AxisEncoder) -> Tensor:
    return encoder(length)


class AxisWisePositionEncoder(Module):
    def __init__(self, dim: int, rng: np.random.Generator, normalize: bool = False):
        self.dim = dim
        self.x_axis = AxisEncoder(dim, rng, normalize)
        self.y_axis = AxisEncoder(dim, rng, normalize)

    def forward(self, h8: int, w8: int) -> Tensor:
        return build_position_map(h8, w8, self.x_axis, self.y_axis)


def build_position_map(h8: int, w8: int, x_axis: AxisEncoder, y_axis: AxisEncoder) -> Tensor:
    """Broadcast sum of row and column embeddings, shape (C, H8, W8)."""
    fx = x_axis(w8)
    fy = y_axis(h8)
    c = fx.shape[0]
    return fy.reshape(c, h8, 1) + fx.reshape(c, 1, w8)


class SinusoidalPositionEncoder(Module):
    """Fixed 2-D sine/cosine encoding (the usual detector-free baseline)."""

    def __init__(self, dim: int, max_period: float = 10000.0):
        if dim % 4:
            raise ShapeError("sinusoidal encoding needs dim divisible by 4")
        self.dim = dim
        self.max_period = max_period

    def forward(self, h8: int, w8: int) -> Tensor:
        d = self.dim
        ys, xs = np.meshgrid(np.arange(h8, dtype=np.float64), np.arange(w8, dtype=np.float64), indexing="ij")
        freq = np.exp(np.arange(0, d // 2, 2) * (-math.log(self.max_period) / (d // 2)))
        pe = np.zeros((d, h8, w8))
        pe[0::4] = np.sin(xs[None] * freq[:, None, None])
        pe[1::4] = np.cos(xs[None] * freq[:, None, None])
        pe[2::4] = np.sin(ys[None] * freq[:, None, None])
        pe[3::4] = np.cos(ys[None] * freq[:, None, None])
        return Tensor(pe)


def apply_position(coarse: Tensor, pos: Tensor) -> Tensor:
    """Add the positional map and flatten to the (..., N, C) descriptor sequence."""
    if coarse.shape[-3:] != pos.shape:
        raise ShapeError(f"coarse map {coarse.shape} and positional map {pos.shape} disagree")
    return ops.image_to_seq(coarse + pos)


def make_position_encoder(kind: str, dim: int, rng: np.random.Generator, normalize: bool = False) -> Module:
    if kind == "awpe":
        return AxisWisePositionEncoder(dim, rng, normalize)
    if kind == "sinusoidal":
        return SinusoidalPositionEncoder(dim)
    raise ValueError(f"unknown position encoder {kind!r}")
