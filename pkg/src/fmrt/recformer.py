"""Reconciliatory transformer layer and the self/cross interleaving schedule.

A layer ``RecF(U, R)`` has three stages:

* GPAL: two receptive-field branches (depth-wise convs of two sizes, then a
  1x1 squeeze to C/2) give queries; keys and values are projected from ``R``;
  each branch runs linear attention.
* PWL: a per-token softmax over two scalar branch responses weights the two
  messages, which are concatenated, mixed and layer-normalized.
* LPFFN: ``[U || message]`` goes through two rounds of parallel depth-wise
  convolutions (2C -> 4C -> 8C channels), a linear squeeze back to C and a
  residual connection to ``U``.

Sequences are (..., N, C) tensors; the (H, W) grid they flatten is passed
alongside as ``hw``.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor
from .nn import DWConv, LayerNorm, Linear, Module, PWConv

Grid = Tuple[int, int]


def linear_attention(Q: Tensor, K: Tensor, V: Tensor, normalized: bool = False, eps: float = 1e-6) -> Tensor:
    """``phi(Q) @ (phi(K).T @ V)`` evaluated right to left.

    Cost is O((N + M) d^2). With ``normalized`` each output row is divided by
    ``phi(q) . sum_m phi(k_m)``.
    """
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"query/key widths differ: {Q.shape} vs {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"key/value lengths differ: {K.shape} vs {V.shape}")
    q = ops.phi(Q)
    k = ops.phi(K)
    kv = ops.matmul(ops.swapaxes(k, -1, -2), V)
    out = ops.matmul(q, kv)
    if normalized:
        ksum = ops.swapaxes(ops.sum(k, axis=-2, keepdims=True), -1, -2)
        out = out / (ops.matmul(q, ksum) + eps)
    return out


class FeaturePerceptionLayer(Module):
    def __init__(self, dim: int, rng: np.random.Generator, kernels: Sequence[int] = (3, 5)):
        if dim % 2:
            raise ShapeError("feature dimension must be even")
        k_small, k_large = kernels
        self.dw_small = DWConv(dim, k_small, rng)
        self.dw_large = DWConv(dim, k_large, rng)
        self.squeeze_small = PWConv(dim, dim // 2, rng)
        self.squeeze_large = PWConv(dim, dim // 2, rng)

    def forward(self, U: Tensor, hw: Grid) -> Tuple[Tensor, Tensor]:
        img = ops.seq_to_image(U, *hw)
        u_small = ops.image_to_seq(self.squeeze_small(self.dw_small(img)))
        u_large = ops.image_to_seq(self.squeeze_large(self.dw_large(img)))
        return u_small, u_large


def fpl(U: Tensor, hw: Grid, layer: FeaturePerceptionLayer) -> Tuple[Tensor, Tensor]:
    return layer(U, hw)


class GlobalPerceptionAttention(Module):
    def __init__(
        self,
        dim: int,
        rng: np.random.Generator,
        kernels: Sequence[int] = (3, 5),
        normalized: bool = False,
    ):
        half = dim // 2
        self.normalized = normalized
        self.fpl = FeaturePerceptionLayer(dim, rng, kernels)
        self.q_small = Linear(half, half, rng)
        self.q_large = Linear(half, half, rng)
        self.k_small = Linear(dim, half, rng)
        self.v_small = Linear(dim, half, rng)
        self.k_large = Linear(dim, half, rng)
        self.v_large = Linear(dim, half, rng)

    def forward(self, U: Tensor, R: Tensor, hw: Grid) -> Tuple[Tensor, Tensor]:
        if U.shape[-1] != R.shape[-1]:
            raise ShapeError(f"U and R widths differ: {U.shape} vs {R.shape}")
        u_small, u_large = self.fpl(U, hw)
        m_small = linear_attention(
            self.q_small(u_small), self.k_small(R), self.v_small(R), self.normalized
        )
        m_large = linear_attention(
            self.q_large(u_large), self.k_large(R), self.v_large(R), self.normalized
        )
        return m_small, m_large


class PerceptionWeightLayer(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        half = dim // 2
        self.score_small = Linear(half, 1, rng)
        self.score_large = Linear(half, 1, rng)
        self.merge = Linear(dim, dim, rng)
        self.norm = LayerNorm(dim)

    def branch_weights(self, m_small: Tensor, m_large: Tensor) -> Tensor:
        """Per-token softmax over the two branch responses, shape (..., N, 2)."""
        logits = ops.concat([self.score_small(m_small), self.score_large(m_large)], axis=-1)
        return ops.softmax(logits, axis=-1)

    def forward(self, m_small: Tensor, m_large: Tensor) -> Tensor:
        alpha = self.branch_weights(m_small, m_large)
        weighted = ops.concat([m_small * alpha[..., 0:1], m_large * alpha[..., 1:2]], axis=-1)
        return self.norm(self.merge(weighted))


class LocalPerceptionFFN(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.dw1_small = DWConv(2 * dim, 3, rng)
        self.dw1_large = DWConv(2 * dim, 5, rng)
        self.dw2_small = DWConv(4 * dim, 3, rng)
        self.dw2_large = DWConv(4 * dim, 5, rng)
        self.squeeze = Linear(8 * dim, dim, rng)

    def forward(self, U: Tensor, message: Tensor, hw: Grid, trace: Optional[List[int]] = None) -> Tensor:
        if U.shape != message.shape:
            raise ShapeError(f"U {U.shape} and message {message.shape} disagree")
        x = ops.seq_to_image(ops.concat([U, message], axis=-1), *hw)
        x1 = ops.concat([self.dw1_small(x), self.dw1_large(x)], axis=-3)
        x2 = ops.concat([self.dw2_small(x1), self.dw2_large(x1)], axis=-3)
        seq = ops.image_to_seq(x2)
        out = self.squeeze(seq)
        if trace is not None:
            trace.extend([x.shape[-3], x1.shape[-3], x2.shape[-3], out.shape[-1]])
        return U + out


class RecFormerLayer(Module):
    def __init__(
        self,
        dim: int,
        rng: np.random.Generator,
        kernels: Sequence[int] = (3, 5),
        normalized: bool = False,
    ):
        self.dim = dim
        self.gpal = GlobalPerceptionAttention(dim, rng, kernels, normalized)
        self.pwl = PerceptionWeightLayer(dim, rng)
        self.lpffn = LocalPerceptionFFN(dim, rng)

    def forward(self, U: Tensor, R: Tensor, hw: Grid) -> Tensor:
        m_small, m_large = self.gpal(U, R, hw)
        return self.lpffn(U, self.pwl(m_small, m_large), hw)


def recformer_layer(U: Tensor, R: Tensor, hw: Grid, layer: RecFormerLayer) -> Tensor:
    return layer(U, R, hw)


class InterleavedBlock(Module):
    """One round of the schedule: self layer (shared by A and B), then cross."""

    def __init__(self, dim: int, rng: np.random.Generator, kernels: Sequence[int] = (3, 5), normalized: bool = False):
        self.self_layer = RecFormerLayer(dim, rng, kernels, normalized)
        self.cross_layer = RecFormerLayer(dim, rng, kernels, normalized)

    def forward(self, fa: Tensor, fb: Tensor, hw: Grid) -> Tuple[Tensor, Tensor]:
        fa = self.self_layer(fa, fa, hw)
        fb = self.self_layer(fb, fb, hw)
        fa = self.cross_layer(fa, fb, hw)
        # The B update attends to the already-updated A sequence.
        fb = self.cross_layer(fb, fa, hw)
        return fa, fb


class RecFormer(Module):
    def __init__(
        self,
        dim: int,
        n_rounds: int,
        rng: np.random.Generator,
        kernels: Sequence[int] = (3, 5),
        normalized: bool = False,
    ):
        self.dim = dim
        self.blocks = [InterleavedBlock(dim, rng, kernels, normalized) for _ in range(n_rounds)]

    def forward(self, fa: Tensor, fb: Tensor, hw: Grid) -> Tuple[Tensor, Tensor]:
        return interleave(fa, fb, self.blocks, hw)


def interleave(fa: Tensor, fb: Tensor, blocks: Sequence[InterleavedBlock], hw: Grid) -> Tuple[Tensor, Tensor]:
    for block in blocks:
        fa, fb = block(fa, fb, hw)
    return fa, fb
