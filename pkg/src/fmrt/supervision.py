"""Ground-truth correspondences from a known warp and the two training losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor
from .coarse import CoarseMatchSet

EPS = 1e-6
LOG_EPS, LOG_1M_EPS = float(np.log(EPS)), float(np.log1p(-EPS))


class SingularWarpError(ValueError):
    pass


@dataclass(frozen=True)
class WarpSpec:
    """3x3 homography taking A-pixel coordinates to B-pixel coordinates."""

    H: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.H, dtype=np.float64)
        if h.shape != (3, 3):
            raise ShapeError(f"homography must be 3x3, got {h.shape}")
        if not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) <= 1e-12:
            raise SingularWarpError("homography is singular")
        object.__setattr__(self, "H", h)

    @classmethod
    def identity(cls) -> "WarpSpec":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "WarpSpec":
        return cls(np.array([[1.0, 0, tx], [0, 1.0, ty], [0, 0, 1.0]]))

    def inverse(self) -> "WarpSpec":
        return WarpSpec(np.linalg.inv(self.H))

    def project(self, pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Warp (K, 2) points; also returns a mask of points in front (w > 0)."""
        return project_points(self.H, pts)


def project_points(H: np.ndarray, pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    homog = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ np.asarray(H, dtype=np.float64).T
    w = homog[:, 2]
    valid = w > 1e-12
    safe = np.where(valid, w, 1.0)
    return homog[:, :2] / safe[:, None], valid


def _inside(pts: np.ndarray, valid: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    h, w = size
    return valid & (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)


def nearest_index(query: np.ndarray, ref: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Index of the nearest ``ref`` point for each query; ties go to the lowest index."""
    out = np.empty(len(query), dtype=np.int64)
    ref_sq = (ref * ref).sum(axis=1)
    for start in range(0, len(query), chunk):
        q = query[start : start + chunk]
        d = (q * q).sum(axis=1)[:, None] - 2.0 * q @ ref.T + ref_sq[None, :]
        out[start : start + chunk] = d.argmin(axis=1)
    return out


@dataclass
class GroundTruthMatches:
    pairs: np.ndarray  # (M, 2) int, (i in A, j in B)

    def __len__(self) -> int:
        return int(self.pairs.shape[0])

    def as_set(self) -> set:
        return {(int(a), int(b)) for a, b in self.pairs}

    def mask(self, n_a: int, n_b: int) -> np.ndarray:
        m = np.zeros((n_a, n_b), dtype=bool)
        if len(self):
            m[self.pairs[:, 0], self.pairs[:, 1]] = True
        return m


def gt_matches(
    pa: np.ndarray,
    pb: np.ndarray,
    warp: WarpSpec,
    size_b: Tuple[int, int],
    size_a: Tuple[int, int] | None = None,
) -> GroundTruthMatches:
    """Mutual nearest keypoints under the warp, restricted to in-bounds projections.

    ``size_*`` are (height, width); A and B default to the same size.
    """
    size_a = size_b if size_a is None else size_a
    pa = np.asarray(pa, dtype=np.float64)
    pb = np.asarray(pb, dtype=np.float64)
    ab, valid_ab = warp.project(pa)
    ba, valid_ba = warp.inverse().project(pb)
    in_b = _inside(ab, valid_ab, size_b)
    in_a = _inside(ba, valid_ba, size_a)
    nn_ab = nearest_index(ab, pb)
    nn_ba = nearest_index(ba, pa)
    idx = np.arange(len(pa))
    keep = in_b & in_a[nn_ab] & (nn_ba[nn_ab] == idx)
    pairs = np.stack([idx[keep], nn_ab[keep]], axis=1).astype(np.int64)
    return GroundTruthMatches(pairs)


def gt_offsets(matches: CoarseMatchSet, warp: WarpSpec, size_b: Tuple[int, int] | None = None):
    """sigma_gt = warp(pa) - pb per match, plus a mask of usable targets.

    With ``size_b`` given the mask also drops projections outside image B.
    """
    proj, valid = warp.project(matches.pa)
    if size_b is not None:
        valid = _inside(proj, valid, size_b)
    return proj - matches.pb, valid


def coarse_loss(
    g: Tensor, gt: GroundTruthMatches, denominator: str = "full", log_g: Optional[Tensor] = None
) -> Tensor:
    """Binary cross entropy over the confidence matrix.

    Positives are averaged over the ground-truth cells. Negatives are averaged
    over every other cell (``N_a * N_b - |gt|`` of them); ``denominator="rows"``
    divides the negative sum by ``N - |gt|`` instead.

    With ``log_g`` (see :func:`fmrt.coarse.log_dual_softmax`) the positive term
    reads the clamped log directly. The value is unchanged, but the gradient is
    that of the unclamped log, so cells that start below ``EPS`` still learn.
    """
    n_a, n_b = g.shape[-2:]
    mask = gt.mask(n_a, n_b)
    n_pos = int(mask.sum())
    if denominator == "full":
        n_neg = n_a * n_b - n_pos
    elif denominator == "rows":
        n_neg = max(n_a - n_pos, 1)
    else:
        raise ValueError(f"unknown denominator {denominator!r}")
    gc = ops.clamp(g, EPS, 1.0 - EPS)
    pos_w = Tensor(mask.astype(g.dtype))
    neg_w = Tensor((~mask).astype(g.dtype))
    loss = ops.sum(ops.log(1.0 - gc) * neg_w) * (-1.0 / max(n_neg, 1))
    if n_pos:
        if log_g is None:
            log_pos = ops.log(gc)
        else:
            log_pos = ops.clamp(log_g, LOG_EPS, LOG_1M_EPS, straight_through=True)
        loss = loss - ops.sum(log_pos * pos_w) * (1.0 / n_pos)
    return loss


def fine_loss(sigma: Tensor, sigma_gt) -> Tensor:
    """Mean Euclidean distance between predicted and true offsets; 0 when K = 0."""
    target = np.asarray(sigma_gt.data if isinstance(sigma_gt, Tensor) else sigma_gt)
    if target.shape != sigma.shape:
        raise ShapeError(f"offset shapes differ: {sigma.shape} vs {target.shape}")
    if sigma.shape[0] == 0:
        return Tensor(np.zeros((), dtype=sigma.dtype))
    diff = Tensor(target.astype(sigma.dtype)) - sigma
    return ops.mean(ops.row_norm(diff))


def total_loss(lc, lf, beta: float = 0.2):
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    return lc + lf * beta
