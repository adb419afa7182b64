"""Score matrix, dual-softmax confidence and mutual-nearest match extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor


@dataclass
class CoarseMatchSet:
    i: np.ndarray  # (K,) indices into A's keypoint grid
    j: np.ndarray  # (K,) indices into B's keypoint grid
    conf: np.ndarray  # (K,)
    pa: np.ndarray  # (K, 2) pixel (x, y) in A
    pb: np.ndarray  # (K, 2) pixel (x, y) in B

    def __len__(self) -> int:
        return int(self.i.shape[0])

    @classmethod
    def empty(cls) -> "CoarseMatchSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2)))

    def subset(self, mask: np.ndarray) -> "CoarseMatchSet":
        return CoarseMatchSet(self.i[mask], self.j[mask], self.conf[mask], self.pa[mask], self.pb[mask])


def _l2_normalize(x: Tensor) -> Tensor:
    norm = ops.row_norm(x)
    return x / (norm.reshape(norm.shape + (1,)) + 1e-12)


def score_matrix(fa: Tensor, fb: Tensor, tau: float = 1.0, normalize: bool = False) -> Tensor:
    """S[i, j] = <fa_i, fb_j> / tau for (..., N, C) sequences."""
    if fa.shape[-1] != fb.shape[-1]:
        raise ShapeError(f"descriptor widths differ: {fa.shape} vs {fb.shape}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    if normalize:
        fa, fb = _l2_normalize(fa), _l2_normalize(fb)
    s = ops.matmul(fa, ops.swapaxes(fb, -1, -2))
    return s if tau == 1.0 else s * (1.0 / tau)


def dual_softmax(s: Tensor) -> Tensor:
    """G = softmax over rows times softmax over columns, elementwise."""
    return ops.softmax(s, axis=-1) * ops.softmax(s, axis=-2)


def log_dual_softmax(s: Tensor) -> Tensor:
    """log G computed from log-softmaxes, finite even where G underflows."""
    return ops.log_softmax(s, axis=-1) + ops.log_softmax(s, axis=-2)


def mutual_nearest(g: np.ndarray) -> np.ndarray:
    """(K, 2) index pairs that are each other's argmax; ties go to the lowest index."""
    g = np.asarray(g)
    if g.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    row_best = g.argmax(axis=1)
    col_best = g.argmax(axis=0)
    rows = np.arange(g.shape[0])
    keep = col_best[row_best] == rows
    return np.stack([rows[keep], row_best[keep]], axis=1).astype(np.int64)


def extract_coarse_matches(g: np.ndarray, rho: float, pa: np.ndarray, pb: np.ndarray) -> CoarseMatchSet:
    """Mutual-nearest pairs whose confidence exceeds ``rho``."""
    g = np.asarray(g)
    pairs = mutual_nearest(g)
    if len(pairs) == 0:
        return CoarseMatchSet.empty()
    conf = g[pairs[:, 0], pairs[:, 1]]
    keep = conf > rho
    pairs, conf = pairs[keep], conf[keep]
    return CoarseMatchSet(
        i=pairs[:, 0],
        j=pairs[:, 1],
        conf=conf.astype(np.float64),
        pa=np.asarray(pa, dtype=np.float64)[pairs[:, 0]],
        pb=np.asarray(pb, dtype=np.float64)[pairs[:, 1]],
    )
