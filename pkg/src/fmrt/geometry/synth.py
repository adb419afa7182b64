"""Procedural image pairs related by a known homography."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from ..supervision import WarpSpec, project_points


@dataclass
class SyntheticPair:
    img_a: np.ndarray  # (H, W) float32 in [0, 1]
    img_b: np.ndarray
    warp: WarpSpec
    seed: int


def procedural_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Gaussian blobs, a few hard-edged rectangles and smooth noise, scaled to [0, 1]."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    n_blobs = max(12, (size * size) // 90)
    for _ in range(n_blobs):
        cx, cy = rng.uniform(-4, size + 4, size=2)
        s = rng.uniform(1.5, 0.12 * size + 2.0)
        amp = rng.uniform(-1.0, 1.0)
        img += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * s * s))
    for _ in range(max(3, size // 12)):
        x0, y0 = rng.integers(0, size, size=2)
        w, h = rng.integers(3, max(4, size // 3), size=2)
        img[y0 : y0 + h, x0 : x0 + w] += rng.uniform(-0.6, 0.6)
    img += 0.6 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.2)
    img -= img.min()
    peak = img.max()
    return img / peak if peak > 0 else img


def random_homography(rng: np.random.Generator, size: int, magnitude: float) -> np.ndarray:
    """Rotation/scale/shear/perspective jitter about the image center plus a shift."""
    if magnitude == 0:
        return np.eye(3)
    c = (size - 1) / 2.0
    theta = np.deg2rad(rng.uniform(-15, 15) * magnitude)
    scale = np.exp(rng.uniform(-0.15, 0.15) * magnitude)
    shear = rng.uniform(-0.08, 0.08) * magnitude
    persp = rng.uniform(-0.6, 0.6, size=2) * magnitude / size
    shift = rng.uniform(-0.06, 0.06, size=2) * magnitude * size
    rot = np.array([[np.cos(theta), -np.sin(theta), 0], [np.sin(theta), np.cos(theta), 0], [0, 0, 1.0]])
    affine = rot @ np.array([[scale, shear * scale, 0], [0, scale, 0], [0, 0, 1.0]])
    affine[2, :2] = persp
    to_center = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1.0]])
    back = np.array([[1, 0, c + shift[0]], [0, 1, c + shift[1]], [0, 0, 1.0]])
    H = back @ affine @ to_center
    return H / H[2, 2]


def warp_image(img: np.ndarray, H: np.ndarray, out_shape=None) -> np.ndarray:
    """Backward bilinear warp: out(p) = img(H^-1 p), zero outside the source."""
    h, w = out_shape if out_shape is not None else img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    src, valid = project_points(np.linalg.inv(H), np.stack([xs.ravel(), ys.ravel()], axis=1))
    coords = np.stack([src[:, 1], src[:, 0]])
    out = ndimage.map_coordinates(img.astype(np.float64), coords, order=1, mode="constant", cval=0.0)
    out[~valid] = 0.0
    return out.reshape(h, w)


def _corners_visible(H: np.ndarray, size: int) -> bool:
    corners = np.array([[0, 0], [size - 1, 0], [size - 1, size - 1], [0, size - 1]], dtype=np.float64)
    proj, valid = project_points(H, corners)
    inside = valid & (proj[:, 0] >= 0) & (proj[:, 0] < size) & (proj[:, 1] >= 0) & (proj[:, 1] < size)
    return bool(inside.any())


def synth_pair(
    seed: int,
    size: int = 48,
    warp_magnitude: float = 1.0,
    photometric: float = 0.05,
    H: Optional[np.ndarray] = None,
) -> SyntheticPair:
    """Deterministic pair for ``seed``; ``H`` overrides the random homography."""
    if size % 8:
        raise ValueError("size must be divisible by 8")
    rng = np.random.default_rng(seed)
    img_a = procedural_texture(rng, size)
    if H is None:
        magnitude = warp_magnitude
        H = random_homography(rng, size, magnitude)
        while not _corners_visible(H, size):
            magnitude *= 0.5
            H = random_homography(rng, size, magnitude)
    H = np.asarray(H, dtype=np.float64)
    img_b = warp_image(img_a, H)
    if photometric > 0:
        gain = 1.0 + rng.uniform(-photometric, photometric)
        bias = rng.uniform(-photometric, photometric)
        img_b = np.clip(gain * img_b + bias, 0.0, 1.0)
    return SyntheticPair(img_a.astype(np.float32), img_b.astype(np.float32), WarpSpec(H), seed)
