"""Coarse-to-fine refinement on 1/2-resolution features.

For every coarse match a w x w window is cut from each fine map around the
match location (fine index ``round(p / 2)``). Both window sequences go through
the window-level transformer, the A window's center token is correlated with
every B token, and the softmax-weighted mean grid offset becomes the
sub-cell correction of the B keypoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor
from .coarse import CoarseMatchSet
from .recformer import RecFormer

FINE_STRIDE = 2


@dataclass
class WindowPair:
    wa: Tensor  # (K, C, w, w)
    wb: Tensor  # (K, C, w, w)
    centers_a: np.ndarray  # (K, 2) fine-grid (col, row) actually used
    centers_b: np.ndarray
    shift_b: np.ndarray  # (K, 2) clamped minus mapped B center, fine units
    window: int

    def __len__(self) -> int:
        return int(self.centers_a.shape[0])


@dataclass
class FineMatchSet:
    i: np.ndarray
    j: np.ndarray
    pa: np.ndarray  # (K, 2) == coarse pa
    pb: np.ndarray  # (K, 2) == coarse pb + sigma
    sigma: np.ndarray  # (K, 2)
    conf_coarse: np.ndarray
    conf: np.ndarray

    def __len__(self) -> int:
        return int(self.i.shape[0])


def fine_index(p: np.ndarray) -> np.ndarray:
    """Pixel coordinate -> nearest fine-grid index, rounding halves up."""
    return np.floor(np.asarray(p, dtype=np.float64) / FINE_STRIDE + 0.5).astype(np.int64)


def _centers(points: np.ndarray, height: int, width: int, radius: int):
    mapped = fine_index(points) if len(points) else np.zeros((0, 2), dtype=np.int64)
    lo = radius
    hi = np.array([width - 1 - radius, height - 1 - radius])
    if np.any(hi < lo):
        raise ShapeError(f"{2 * radius + 1}x{2 * radius + 1} window does not fit a {height}x{width} fine map")
    clamped = np.clip(mapped, lo, hi)
    return clamped, clamped - mapped


def _gather(fmap: Tensor, centers: np.ndarray, radius: int) -> Tensor:
    w = 2 * radius + 1
    offs = np.arange(-radius, radius + 1)
    rows = centers[:, 1, None, None] + offs[None, :, None]  # (K, w, 1)
    cols = centers[:, 0, None, None] + offs[None, None, :]  # (K, 1, w)
    rows = np.broadcast_to(rows, (len(centers), w, w))
    cols = np.broadcast_to(cols, (len(centers), w, w))
    patches = fmap[:, rows, cols]  # (C, K, w, w)
    return ops.transpose(patches, (1, 0, 2, 3))


def crop_windows(fine_a: Tensor, fine_b: Tensor, matches: CoarseMatchSet, w: int) -> WindowPair:
    """Cut (K, C, w, w) windows around each match; border windows are clamped inward."""
    if w % 2 == 0:
        raise ShapeError("window size must be odd")
    if fine_a.ndim != 3 or fine_a.shape != fine_b.shape:
        raise ShapeError(f"fine maps must be matching (C, H, W) tensors, got {fine_a.shape}, {fine_b.shape}")
    c, h, wd = fine_a.shape
    r = (w - 1) // 2
    ca, _ = _centers(matches.pa, h, wd, r)
    cb, shift = _centers(matches.pb, h, wd, r)
    if len(matches) == 0:
        empty = Tensor(np.zeros((0, c, w, w), dtype=fine_a.dtype))
        return WindowPair(empty, empty, ca, cb, shift, w)
    return WindowPair(_gather(fine_a, ca, r), _gather(fine_b, cb, r), ca, cb, shift, w)


def concat_windows(parts) -> WindowPair:
    """Stack the windows of several pairs into one batch, in order."""
    parts = [p for p in parts if len(p)]
    if not parts:
        raise ValueError("no windows to concatenate")
    if len({p.window for p in parts}) != 1:
        raise ShapeError("window sizes differ")
    if len(parts) == 1:
        return parts[0]
    return WindowPair(
        ops.concat([p.wa for p in parts], axis=0),
        ops.concat([p.wb for p in parts], axis=0),
        np.concatenate([p.centers_a for p in parts]),
        np.concatenate([p.centers_b for p in parts]),
        np.concatenate([p.shift_b for p in parts]),
        parts[0].window,
    )


def window_offsets(w: int) -> np.ndarray:
    """(w*w, 2) grid offsets (dx, dy) from the window center, token order row-major."""
    r = (w - 1) // 2
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=1).astype(np.float64)


@dataclass
class Refinement:
    sigma: Tensor  # (K, 2) image-pixel offsets, differentiable
    conf: np.ndarray  # (K,)
    heatmap: Tensor  # (K, w*w)


def expectation_offset(heatmap: Tensor, w: int) -> Tensor:
    """Sum_u p(u) * (u - center) over the window grid, per row of ``heatmap``."""
    grid = Tensor(window_offsets(w).astype(heatmap.dtype))
    return ops.matmul(heatmap, grid)


def refine(windows: WindowPair, transformer: RecFormer, fine_tau: float = 1.0) -> Refinement:
    w = windows.window
    k = len(windows)
    if k == 0:
        z = Tensor(np.zeros((0, 2), dtype=windows.wa.dtype))
        return Refinement(z, np.zeros(0), Tensor(np.zeros((0, w * w), dtype=windows.wa.dtype)))
    seq_a = ops.image_to_seq(windows.wa)
    seq_b = ops.image_to_seq(windows.wb)
    seq_a, seq_b = transformer(seq_a, seq_b, (w, w))
    center = seq_a[:, (w * w) // 2, :]  # (K, C)
    scores = ops.matmul(seq_b, center.reshape(k, -1, 1)).reshape(k, w * w)
    if fine_tau != 1.0:
        scores = scores * (1.0 / fine_tau)
    heat = ops.softmax(scores, axis=-1)
    offset = expectation_offset(heat, w)
    shift = Tensor(windows.shift_b.astype(offset.dtype))
    sigma = (offset + shift) * float(FINE_STRIDE)
    return Refinement(sigma=sigma, conf=heat.data.max(axis=-1).astype(np.float64), heatmap=heat)


def compose_fine_matches(matches: CoarseMatchSet, sigma, conf) -> FineMatchSet:
    sigma = np.asarray(sigma.data if isinstance(sigma, Tensor) else sigma, dtype=np.float64).reshape(-1, 2)
    conf = np.asarray(conf, dtype=np.float64).reshape(-1)
    if len(sigma) != len(matches) or len(conf) != len(matches):
        raise ShapeError(f"{len(matches)} coarse matches but {len(sigma)} offsets / {len(conf)} confidences")
    return FineMatchSet(
        i=matches.i.copy(),
        j=matches.j.copy(),
        pa=matches.pa.copy(),
        pb=matches.pb + sigma,
        sigma=sigma,
        conf_coarse=matches.conf.copy(),
        conf=conf,
    )
