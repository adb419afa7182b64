"""Corner correctness, mean matching accuracy and error AUC."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from ..supervision import project_points

CCM_THRESHOLDS = (1, 3, 5)
MMA_THRESHOLDS = tuple(range(1, 11))


def image_corners(size) -> np.ndarray:
    h, w = (size, size) if np.isscalar(size) else size
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)


def corner_error(H_est: np.ndarray, H_gt: np.ndarray, size) -> float:
    """Mean distance between the image corners warped by the two homographies."""
    corners = image_corners(size)
    a, va = project_points(H_est, corners)
    b, vb = project_points(H_gt, corners)
    if not (va.all() and vb.all()):
        return float("inf")
    return float(np.sqrt(((a - b) ** 2).sum(axis=1)).mean())


def ccm(H_est, H_gt, size, thresholds: Sequence[float] = CCM_THRESHOLDS) -> Dict[str, object]:
    err = corner_error(H_est, H_gt, size) if H_est is not None else float("inf")
    return {"corner_error": err, "passes": {float(t): bool(err < t) for t in thresholds}}


def reprojection_error(pa: np.ndarray, pb: np.ndarray, H_gt: np.ndarray) -> np.ndarray:
    proj, valid = project_points(H_gt, pa)
    err = np.sqrt(((proj - np.asarray(pb, dtype=np.float64)) ** 2).sum(axis=1))
    err[~valid] = np.inf
    return err


def mma(pa: np.ndarray, pb: np.ndarray, H_gt: np.ndarray, thresholds: Sequence[float] = MMA_THRESHOLDS) -> Optional[np.ndarray]:
    """Fraction of matches with reprojection error below each threshold; None if empty."""
    if len(pa) == 0:
        return None
    err = reprojection_error(pa, pb, H_gt)
    return mma_from_errors(err, thresholds)


def mma_from_errors(errors, thresholds: Sequence[float] = MMA_THRESHOLDS) -> Optional[np.ndarray]:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        return None
    return np.array([(errors < t).mean() for t in thresholds])


def auc(errors, thresholds: Sequence[float]) -> np.ndarray:
    """Normalized area under the cumulative error curve up to each threshold.

    The curve joins (0, 0) and (e_k, k / n) for the sorted errors with straight
    segments and is integrated by the trapezoid rule. Failures may be passed as
    ``inf``; they count in n but never reach the curve.
    """
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    if errors.size == 0:
        raise ValueError("auc of an empty error list")
    if np.any(errors < 0):
        raise ValueError("errors must be nonnegative")
    recall = np.arange(1, len(errors) + 1) / len(errors)
    errors = np.concatenate([[0.0], errors])
    recall = np.concatenate([[0.0], recall])
    out = []
    for t in thresholds:
        last = int(np.searchsorted(errors, t))
        r = np.concatenate([recall[:last], [recall[last - 1]]])
        e = np.concatenate([errors[:last], [t]])
        out.append(np.trapezoid(r, x=e) / t)
    return np.array(out)


@dataclass
class MetricReport:
    ccm_error: float
    ccm_pass: Dict[float, bool]
    mma: Optional[np.ndarray]
    n_matches: int
    extra: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {
            "corner_error": self.ccm_error,
            "ccm": {str(k): v for k, v in self.ccm_pass.items()},
            "mma": None if self.mma is None else [float(v) for v in self.mma],
            "n_matches": self.n_matches,
            **self.extra,
        }
