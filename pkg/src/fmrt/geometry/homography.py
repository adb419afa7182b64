"""Normalized 4-point DLT inside a seeded RANSAC loop."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..supervision import project_points


class HomographyError(RuntimeError):
    """Estimation failed (too few matches or only degenerate samples)."""


@dataclass
class RansacConfig:
    threshold: float = 3.0
    max_iters: int = 2000
    confidence: float = 0.999
    seed: int = 0


def normalize_points(pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Isotropic similarity T: centroid to the origin, mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return (pts - c) * s, T


def _design_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    rows_u = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=1)
    rows_v = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=1)
    A = np.empty((2 * len(x), 9))
    A[0::2] = rows_u
    A[1::2] = rows_v
    return A


def dlt(src: np.ndarray, dst: np.ndarray, normalize: bool = True) -> Optional[np.ndarray]:
    """Least-squares homography from >= 4 correspondences, scaled so H[2, 2] = 1.

    Returns None when the system is rank deficient or H[2, 2] vanishes.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if normalize:
        src_n, T_src = normalize_points(src)
        dst_n, T_dst = normalize_points(dst)
    else:
        src_n, dst_n, T_src, T_dst = src, dst, np.eye(3), np.eye(3)
    A = _design_matrix(src_n, dst_n)
    _, sv, vt = np.linalg.svd(A)
    # Nullspace must be one-dimensional.
    if len(sv) >= 8 and sv[7] <= 1e-10 * sv[0]:
        return None
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(T_dst) @ Hn @ T_src
    if abs(H[2, 2]) < 1e-12:
        return None
    return H / H[2, 2]


def _collinear(p: np.ndarray, q: np.ndarray, r: np.ndarray, tol: float) -> bool:
    area = abs((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]))
    scale = max(np.linalg.norm(q - p) * np.linalg.norm(r - p), 1e-300)
    return area <= tol * scale


def degenerate_sample(pts: np.ndarray, tol: float = 1e-6) -> bool:
    """True if any three of the four points are (nearly) collinear."""
    for skip in range(4):
        a, b, c = (pts[k] for k in range(4) if k != skip)
        if _collinear(a, b, c, tol):
            return True
    return False


def reprojection_errors(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    proj, valid = project_points(H, src)
    err = np.sqrt(((proj - dst) ** 2).sum(axis=1))
    err[~valid] = np.inf
    return err


def estimate_homography(
    src: np.ndarray, dst: np.ndarray, config: Optional[RansacConfig] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Robustly fit H with dst ~ H src.

    Returns ``(H, inlier_mask)``. The model with the most inliers at
    ``config.threshold`` px (ties broken by lower summed inlier error) is refit
    on all of its inliers until the inlier set stops changing.
    """
    cfg = config or RansacConfig()
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise HomographyError(f"need at least 4 correspondences, got {n}")
    rng = np.random.default_rng(cfg.seed)

    best_H, best_count, best_cost = None, -1, np.inf
    needed = cfg.max_iters
    it = 0
    while it < min(cfg.max_iters, needed):
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        if degenerate_sample(src[sample]) or degenerate_sample(dst[sample]):
            continue
        H = dlt(src[sample], dst[sample])
        if H is None:
            continue
        err = reprojection_errors(H, src, dst)
        inl = err < cfg.threshold
        count = int(inl.sum())
        cost = float(err[inl].sum())
        if count > best_count or (count == best_count and cost < best_cost):
            best_H, best_count, best_cost = H, count, cost
            ratio = count / n
            if ratio >= 1.0:
                needed = 0
            elif ratio > 0:
                needed = int(np.ceil(np.log(1 - cfg.confidence) / np.log(1 - ratio**4)))

    if best_H is None:
        raise HomographyError("all minimal samples were degenerate")

    H = best_H
    inliers = reprojection_errors(H, src, dst) < cfg.threshold
    for _ in range(10):
        if inliers.sum() < 4:
            break
        refit = dlt(src[inliers], dst[inliers])
        if refit is None:
            break
        new_inliers = reprojection_errors(refit, src, dst) < cfg.threshold
        if new_inliers.sum() < inliers.sum():
            break
        H = refit
        if np.array_equal(new_inliers, inliers):
            break
        inliers = new_inliers
    inliers = reprojection_errors(H, src, dst) < cfg.threshold
    return H / H[2, 2], inliers
