"""Recombining the two refined branches, smoothing, and the upsampling decoder."""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .core import (
    CorrelationVolume,
    EmbeddingPair,
    PartitionMismatchError,
    SegmentationOutput,
    ShapeError,
    Stage,
    TokenPartition,
)
from .hrm import WindowAttentionBlock


def _check_branches(c_f: CorrelationVolume, c_b: CorrelationVolume, part: TokenPartition) -> torch.Tensor:
    """Validate stages/shapes and that each branch is zero off its own tokens; return ``[H,W,N,1]`` fg mask."""
    c_f.require(Stage.FUSED)
    c_b.require(Stage.FUSED)
    if c_f.shape != c_b.shape:
        raise ShapeError(f"branch volumes differ in shape: {c_f.shape} vs {c_b.shape}")
    h, w, n, _ = c_f.shape
    if tuple(part.fg_mask.shape) != (h * w, n):
        raise PartitionMismatchError(f"partition {tuple(part.fg_mask.shape)} does not match volume {c_f.shape}")
    fg = part.fg_mask.reshape(h, w, n, 1)
    if bool((c_f.values.detach() * ~fg).any()) or bool((c_b.values.detach() * fg).any()):
        raise PartitionMismatchError("branch volumes are non-zero outside the tokens the partition assigns them")
    return fg


def gated_merge(c_f: torch.Tensor, c_b: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
    return gate * c_f + (1.0 - gate) * c_b


def smooth(values: torch.Tensor, blocks) -> torch.Tensor:
    """Unmasked plain + shifted window attention over each class's grid."""
    x = values.permute(2, 0, 1, 3)
    for blk in blocks:
        x = blk(x)
    return x.permute(1, 2, 0, 3)


def make_smoothing(d: int, window_size: int, n_heads: int = 4) -> nn.ModuleList:
    return nn.ModuleList([WindowAttentionBlock(d, window_size, False, n_heads),
                          WindowAttentionBlock(d, window_size, True, n_heads)])


class GatedAggregator(nn.Module):
    """Learnable sigmoid gate between branches, per class and per channel (or per class only)."""

    def __init__(self, n_classes: int, d: int, per_channel: bool = True):
        super().__init__()
        self.gate_logit = nn.Parameter(torch.zeros(n_classes, d if per_channel else 1))

    def gate(self) -> torch.Tensor:
        return torch.sigmoid(self.gate_logit)


class AttentionMerge(nn.Module):
    """Per token, a learned query scores the two branch values; softmax over the pair mixes them."""

    def __init__(self, d: int):
        super().__init__()
        self.query = nn.Parameter(torch.zeros(d))
        self.key = nn.Linear(d, d)

    def weights(self, c_f: torch.Tensor, c_b: torch.Tensor) -> torch.Tensor:
        scale = 1.0 / math.sqrt(c_f.shape[-1])
        s = torch.stack([self.key(c_f) @ self.query, self.key(c_b) @ self.query], dim=-1) * scale
        return torch.softmax(s, dim=-1)  # [..., 2]

    def forward(self, c_f: torch.Tensor, c_b: torch.Tensor) -> torch.Tensor:
        a = self.weights(c_f, c_b)
        return a[..., :1] * c_f + a[..., 1:] * c_b


def aggregate(c_f2: CorrelationVolume, c_b2: CorrelationVolume, part: TokenPartition,
              aggregator: GatedAggregator, smoothing, gate: Optional[torch.Tensor] = None) -> CorrelationVolume:
    """Gated recombination ``g * C''_f + (1 - g) * C''_b`` followed by the smoothing block.

    ``gate`` overrides the learned gate; it must broadcast against ``[H, W, N_C, D]``.
    """
    _check_branches(c_f2, c_b2, part)
    g = aggregator.gate() if gate is None else gate
    merged = gated_merge(c_f2.values, c_b2.values, g)
    return c_f2.advance(smooth(merged, smoothing), Stage.AGGREGATED)


def hard_aggregate(c_f2: CorrelationVolume, c_b2: CorrelationVolume, part: TokenPartition,
                   smoothing) -> CorrelationVolume:
    """Reassemble by mask indices with no gate, then smooth."""
    fg = _check_branches(c_f2, c_b2, part)
    merged = torch.where(fg, c_f2.values, c_b2.values)
    return c_f2.advance(smooth(merged, smoothing), Stage.AGGREGATED)


def attn_aggregate(c_f2: CorrelationVolume, c_b2: CorrelationVolume, part: TokenPartition,
                   merge: AttentionMerge, smoothing) -> CorrelationVolume:
    _check_branches(c_f2, c_b2, part)
    return c_f2.advance(smooth(merge(c_f2.values, c_b2.values), smoothing), Stage.AGGREGATED)


class _UpStage(nn.Module):
    def __init__(self, d: int, d_guide_in: int, d_guide: int):
        super().__init__()
        self.guide = nn.Linear(d_guide_in, d_guide)
        self.up = nn.ConvTranspose2d(d + d_guide, d, kernel_size=2, stride=2)

    def forward(self, x: torch.Tensor, guide: torch.Tensor) -> torch.Tensor:
        # x [N, D, h, w]; guide [h', w', d_in] with h' dividing h
        g = self.guide(guide).permute(2, 0, 1).unsqueeze(0)
        if g.shape[-2:] != x.shape[-2:]:
            g = F.interpolate(g, size=x.shape[-2:], mode="nearest")
        x = torch.cat([x, g.expand(x.shape[0], -1, -1, -1)], dim=1)
        return F.gelu(self.up(x))


class UpsampleDecoder(nn.Module):
    """Two identical x2 transposed-convolution stages, each concatenating projected guidance,
    then a 1x1 convolution reducing the D channels to one score per class."""

    def __init__(self, d_corr: int, d_enc: int, d_guide: int = 16):
        super().__init__()
        self.stage1 = _UpStage(d_corr, 2 * d_enc, d_guide)  # image embeddings + deep features
        self.stage2 = _UpStage(d_corr, d_enc, d_guide)  # shallow features
        self.head = nn.Conv2d(d_corr, 1, kernel_size=1)

    def zero_head_(self) -> "UpsampleDecoder":
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()
        return self

    def forward(self, c_tilde: torch.Tensor, image: torch.Tensor, guidance) -> torch.Tensor:
        shallow, deep = guidance
        x = c_tilde.permute(2, 3, 0, 1)  # [N, D, H, W]
        x = self.stage1(x, torch.cat([image, deep], dim=-1))
        x = self.stage2(x, shallow)
        return self.head(x)[:, 0].permute(1, 2, 0)  # [4H, 4W, N]


def decode(c_tilde: CorrelationVolume, pair: EmbeddingPair, guidance, decoder: UpsampleDecoder) -> SegmentationOutput:
    c_tilde.require(Stage.AGGREGATED)
    h, w, n, _ = c_tilde.shape
    if pair.grid != (h, w) or pair.n_classes != n:
        raise ShapeError(f"volume {c_tilde.shape} does not match embeddings grid {pair.grid}, {pair.n_classes} classes")
    for g in guidance:
        if tuple(g.shape[:2]) != (h, w):
            raise ShapeError(f"guidance grid {tuple(g.shape[:2])} != {(h, w)}")
    return SegmentationOutput(decoder(c_tilde.values, pair.image, guidance))
