"""End-to-end matcher: backbone, position encoding, transformers, match heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, no_grad
from .awpe import apply_position, make_position_encoder
from .backbone import Backbone, FeaturePyramid, keypoint_grid
from .coarse import CoarseMatchSet, dual_softmax, extract_coarse_matches, log_dual_softmax, score_matrix
from .config import RunConfig
from .fine import FineMatchSet, compose_fine_matches, concat_windows, crop_windows, refine
from .nn import Module
from .recformer import RecFormer
from .supervision import (
    WarpSpec,
    coarse_loss,
    fine_loss,
    gt_matches,
    gt_offsets,
    total_loss,
)


@dataclass
class CoarseOutput:
    pyramid: FeaturePyramid  # batched over (A, B)
    position: Tensor
    seq_a: Tensor
    seq_b: Tensor
    scores: Tensor
    confidence: Tensor
    hw: Tuple[int, int]
    keypoints_a: np.ndarray
    keypoints_b: np.ndarray

    @property
    def fine_a(self) -> Tensor:
        return self.pyramid.fine[0]

    @property
    def fine_b(self) -> Tensor:
        return self.pyramid.fine[1]


@dataclass
class LossTerms:
    coarse: Tensor
    fine: Tensor
    total: Tensor
    n_gt: int
    n_fine: int


def _image_tensor(img) -> Tensor:
    if isinstance(img, Tensor):
        return img
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    return Tensor(arr)


class FMRT(Module):
    def __init__(self, cfg: Optional[RunConfig] = None, seed: Optional[int] = None):
        cfg = cfg or RunConfig.desk()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.backbone = Backbone(cfg.backbone_widths, cfg.coarse_dim, cfg.fine_dim, rng)
        self.position = make_position_encoder(cfg.encoder, cfg.coarse_dim, rng, cfg.awpe_normalize)
        self.coarse_transformer = RecFormer(
            cfg.coarse_dim, cfg.l1, rng, cfg.dw_kernels, cfg.attention_normalized
        )
        self.fine_transformer = RecFormer(
            cfg.fine_dim, cfg.l2, rng, cfg.dw_kernels, cfg.attention_normalized
        )

    # ---------------------------------------------------------------- stages
    def _encode(self, a: Tensor, b: Tensor):
        """Batched coarse pass over (P, 1, H, W) image stacks."""
        p = a.shape[0]
        h, w = a.shape[-2:]
        pyramid = self.backbone(ops.concat([a, b], axis=0))
        h8, w8 = h // 8, w // 8
        position = self.position(h8, w8)
        seq = apply_position(pyramid.coarse, position)
        seq_a, seq_b = self.coarse_transformer(seq[:p], seq[p:], (h8, w8))
        s = score_matrix(seq_a, seq_b, self.cfg.tau, self.cfg.normalize_features)
        return pyramid, position, seq_a, seq_b, s, dual_softmax(s)

    def _coarse_loss(self, g: Tensor, s: Tensor, gt) -> Tensor:
        return coarse_loss(g, gt, self.cfg.loss_denominator, log_g=log_dual_softmax(s))

    def coarse_stage(self, img_a, img_b) -> CoarseOutput:
        a = _image_tensor(img_a)
        b = _image_tensor(img_b)
        if a.shape != b.shape:
            raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
        h, w = a.shape[-2:]
        pyramid, position, seq_a, seq_b, s, g = self._encode(a.reshape(1, 1, h, w), b.reshape(1, 1, h, w))
        kp = keypoint_grid(h, w)
        return CoarseOutput(pyramid, position, seq_a[0], seq_b[0], s[0], g[0], (h // 8, w // 8), kp, kp)

    def coarse_matches(self, out: CoarseOutput) -> CoarseMatchSet:
        return extract_coarse_matches(out.confidence.data, self.cfg.rho, out.keypoints_a, out.keypoints_b)

    def coarse_matches_from(self, g: np.ndarray, kp: np.ndarray) -> CoarseMatchSet:
        return extract_coarse_matches(g, self.cfg.rho, kp, kp)

    def fine_stage(self, out: CoarseOutput, matches: CoarseMatchSet):
        windows = crop_windows(out.fine_a, out.fine_b, matches, self.cfg.window)
        return refine(windows, self.fine_transformer, self.cfg.fine_tau)

    # ------------------------------------------------------------- inference
    def match(self, img_a, img_b) -> Tuple[CoarseMatchSet, FineMatchSet]:
        with no_grad():
            out = self.coarse_stage(img_a, img_b)
            coarse = self.coarse_matches(out)
            ref = self.fine_stage(out, coarse)
        return coarse, compose_fine_matches(coarse, ref.sigma, ref.conf)

    # -------------------------------------------------------------- training
    def pair_loss(self, img_a, img_b, warp: WarpSpec) -> LossTerms:
        out = self.coarse_stage(img_a, img_b)
        h, w = np.asarray(img_a).shape[-2:] if not isinstance(img_a, Tensor) else img_a.shape[-2:]
        gt = gt_matches(out.keypoints_a, out.keypoints_b, warp, (h, w))
        lc = self._coarse_loss(out.confidence, out.scores, gt)

        predicted = self.coarse_matches(out)
        sigma_gt, usable = gt_offsets(predicted, warp, (h, w))
        predicted = predicted.subset(usable)
        sigma_gt = sigma_gt[usable]
        if len(predicted):
            ref = self.fine_stage(out, predicted)
            lf = fine_loss(ref.sigma, sigma_gt)
        else:
            lf = Tensor(np.zeros((), dtype=lc.dtype))
        return LossTerms(lc, lf, total_loss(lc, lf, self.cfg.beta), len(gt), len(predicted))

    def batch_losses(self, imgs_a, imgs_b, warps: Sequence[WarpSpec]) -> List[LossTerms]:
        """Per-pair losses for P same-size pairs evaluated in one batched pass.

        Same values as calling :meth:`pair_loss` on each pair; all fine windows
        share a single refinement call.
        """
        a = np.asarray(imgs_a, dtype=np.float32)
        b = np.asarray(imgs_b, dtype=np.float32)
        if a.ndim != 3 or a.shape != b.shape or len(warps) != a.shape[0]:
            raise ValueError(f"expected two (P, H, W) stacks and P warps, got {a.shape}, {b.shape}, {len(warps)}")
        p, h, w = a.shape
        pyramid, _, _, _, s, g = self._encode(Tensor(a[:, None]), Tensor(b[:, None]))
        kp = keypoint_grid(h, w)
        coarse, fine_sets, targets = [], [], []
        for k, warp in enumerate(warps):
            gk = g[k]
            gt = gt_matches(kp, kp, warp, (h, w))
            coarse.append((self._coarse_loss(gk, s[k], gt), len(gt)))
            predicted = self.coarse_matches_from(gk.data, kp)
            sigma_gt, usable = gt_offsets(predicted, warp, (h, w))
            predicted = predicted.subset(usable)
            fine_sets.append(crop_windows(pyramid.fine[k], pyramid.fine[p + k], predicted, self.cfg.window))
            targets.append(sigma_gt[usable])
        counts = [len(ws) for ws in fine_sets]
        sigma = None
        if sum(counts):
            ref = refine(concat_windows(fine_sets), self.fine_transformer, self.cfg.fine_tau)
            sigma = ref.sigma
        out, start = [], 0
        for (lc, n_gt), n, target in zip(coarse, counts, targets):
            if n:
                lf = fine_loss(sigma[start:start + n], target)
            else:
                lf = Tensor(np.zeros((), dtype=lc.dtype))
            start += n
            out.append(LossTerms(lc, lf, total_loss(lc, lf, self.cfg.beta), n_gt, n))
        return out
