"""Saliency-aware disentanglement: text-to-image cross-attention, the image-text
matching (ITM) head and loss, gradient-weighted attention saliency, the cosine
correlation volume and top-k foreground/background token selection.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .core import (
    AttentionMap,
    CorrelationVolume,
    EmbeddingPair,
    GradientError,
    LabelError,
    SaliencyStack,
    ShapeError,
    Stage,
    TiePolicy,
    TokenPartition,
    ValidationError,
    ZeroNormError,
)

MATCHED = 1  # column of the "matched" class in the 2-way ITM output


class _CrossLayer(nn.Module):
    def __init__(self, dim: int, n_heads: int, final: bool):
        super().__init__()
        self.n_heads = n_heads
        self.final = final
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        # identity query/key at init: each text query starts out matching its own embedding
        nn.init.eye_(self.q.weight)
        nn.init.eye_(self.k.weight)
        if not final:
            # the last layer only has to produce attention probabilities
            self.v = nn.Linear(dim, dim, bias=False)
            self.o = nn.Linear(dim, dim)
            self.norm_ff = nn.LayerNorm(dim)
            self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
            for lin in (self.o, self.ff[2]):
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)

    def forward(self, x: torch.Tensor, img: torch.Tensor):
        n, d = x.shape
        t = img.shape[0]
        dh = d // self.n_heads
        kv = self.norm_kv(img)
        q = self.q(self.norm_q(x)).view(n, self.n_heads, dh).transpose(0, 1)  # [h, n, dh]
        k = self.k(kv).view(t, self.n_heads, dh).transpose(0, 1)  # [h, t, dh]
        probs = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(dh), dim=-1)  # [h, n, t]
        if self.final:
            return x, probs
        v = self.v(kv).view(t, self.n_heads, dh).transpose(0, 1)
        x = x + self.o((probs @ v).transpose(0, 1).reshape(n, d))
        x = x + self.ff(self.norm_ff(x))
        return x, probs


class CrossAttentionStack(nn.Module):
    """Text queries attend over image tokens; the last layer's head-mean is the attention map."""

    def __init__(self, d_enc: int, d_attn: int = 512, n_heads: int = 8, n_layers: int = 3):
        super().__init__()
        if d_attn % n_heads:
            raise ValueError("d_attn must be divisible by n_heads")
        # one shared embedding for both modalities: encoder spaces are already aligned
        self.embed = nn.Linear(d_enc, d_attn, bias=False)
        nn.init.orthogonal_(self.embed.weight)
        self.layers = nn.ModuleList(
            _CrossLayer(d_attn, n_heads, final=(i == n_layers - 1)) for i in range(n_layers))

    def forward(self, image: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        """``image`` [HW, D_enc], ``text`` [N_C, D_enc] -> attention [HW, N_C]."""
        img = self.embed(image)
        x = self.embed(text)
        probs = None
        for layer in self.layers:
            x, probs = layer(x, img)
        return probs.mean(0).transpose(0, 1)


class ItmHead(nn.Module):
    """MLP over one class's attention column -> 2-way logits (not matched, matched).

    The column is multiplied by HW so a uniform map reads as all ones.
    """

    def __init__(self, n_tokens: int, hidden: int = 64):
        super().__init__()
        self.n_tokens = n_tokens
        self.net = nn.Sequential(nn.Linear(n_tokens, hidden), nn.GELU(), nn.Linear(hidden, 2))

    def forward(self, attn_values: torch.Tensor) -> torch.Tensor:
        # [HW, N_C] -> [N_C, 2]
        return self.net(attn_values.transpose(0, 1) * self.n_tokens)


def cross_attend(pair: EmbeddingPair, stack: CrossAttentionStack) -> AttentionMap:
    h, w = pair.grid
    if pair.image.shape[-1] != stack.embed.in_features:
        raise ShapeError(f"encoder width {pair.image.shape[-1]} != stack input {stack.embed.in_features}")
    return AttentionMap(stack(pair.image.reshape(h * w, -1), pair.text))


def one_hot_match(present: torch.Tensor) -> torch.Tensor:
    """Boolean class-presence vector -> one-hot [N, 2] ITM labels."""
    return F.one_hot(present.long(), 2).to(torch.get_default_dtype())


def _check_one_hot(labels: torch.Tensor) -> None:
    if labels.dim() != 2 or labels.shape[1] != 2:
        raise LabelError(f"ITM labels must be [N, 2], got {tuple(labels.shape)}")
    ok = ((labels == 0) | (labels == 1)).all() and (labels.sum(1) == 1).all()
    if not bool(ok):
        raise LabelError("ITM labels must be one-hot rows")


def itm_pair_losses(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-pair cross-entropy between 2-way logits and one-hot labels."""
    _check_one_hot(labels)
    return -(labels.to(logits.dtype) * F.log_softmax(logits, dim=-1)).sum(-1)


def itm_loss(attn: AttentionMap | torch.Tensor, labels: torch.Tensor, head: ItmHead,
             pairs: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean ITM cross-entropy over the (image, class) pairs selected by ``pairs``."""
    values = attn.values if isinstance(attn, AttentionMap) else attn
    losses = itm_pair_losses(head(values), labels)
    if pairs is not None:
        losses = losses[pairs]
    return losses.mean()


def sample_itm_pairs(present: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """All present classes plus an equal number (when available) of absent ones, uniformly drawn."""
    pos = torch.nonzero(present).flatten()
    neg = torch.nonzero(~present).flatten()
    n_neg = min(len(pos), len(neg))
    neg = neg[torch.randperm(len(neg), generator=generator)[:n_neg]]
    return torch.sort(torch.cat([pos, neg])).values


def itm_objective(head: ItmHead, labels: torch.Tensor, per_class: bool = True,
                  pairs: Optional[torch.Tensor] = None) -> Callable[[torch.Tensor], torch.Tensor]:
    """Training-time saliency objective built from the ITM loss.

    ``per_class`` sums the per-class losses so that column n only sees the
    gradient of its own pair's loss; otherwise the batch-mean loss over
    ``pairs`` is used and unsampled classes get zero gradient.
    """
    if per_class:
        return lambda a: itm_pair_losses(head(a), labels).sum()
    return lambda a: itm_loss(a, labels, head, pairs)


def matching_score_objective(head: ItmHead) -> Callable[[torch.Tensor], torch.Tensor]:
    """Inference-time saliency objective: summed matched-class probability; needs no labels."""
    return lambda a: torch.softmax(head(a), dim=-1)[:, MATCHED].sum()


def saliency(attn: AttentionMap, objective: Callable[[torch.Tensor], torch.Tensor],
             grid: tuple[int, int]) -> SaliencyStack:
    """``relu(d objective / dA) * A`` reshaped to ``[H, W, N_C]``.

    The gradient stops at the attention map: ``A`` is detached and re-entered
    as a leaf, so nothing upstream of it is differentiated.
    """
    h, w = grid
    if attn.values.shape[0] != h * w:
        raise ShapeError(f"attention has {attn.values.shape[0]} tokens, grid is {h}x{w}")
    a = attn.values.detach().requires_grad_(True)
    with torch.enable_grad():
        out = objective(a)
        if not torch.is_tensor(out) or out.numel() != 1:
            raise GradientError("saliency objective must return a scalar tensor")
        if not out.requires_grad:
            raise GradientError("saliency objective does not depend on the attention map")
        (grad,) = torch.autograd.grad(out, a, allow_unused=True)
    if grad is None:
        raise GradientError("saliency objective does not depend on the attention map")
    maps = torch.relu(grad) * a.detach()
    return SaliencyStack(maps.reshape(h, w, -1), attn)


def attention_gradient(attn: AttentionMap, objective) -> torch.Tensor:
    """Pre-ReLU gradient of ``objective`` at the attention map, ``[HW, N_C]``."""
    a = attn.values.detach().requires_grad_(True)
    with torch.enable_grad():
        (grad,) = torch.autograd.grad(objective(a), a)
    return grad


class CorrelationLift(nn.Module):
    """Shared affine map from a scalar cosine to D correlation channels."""

    def __init__(self, d_corr: int):
        super().__init__()
        self.proj = nn.Linear(1, d_corr)

    def forward(self, cos: torch.Tensor) -> torch.Tensor:
        return self.proj(cos.unsqueeze(-1))


def cosine_map(pair: EmbeddingPair) -> torch.Tensor:
    """Cosine between every grid embedding and every text embedding, ``[H, W, N_C]``."""
    img_norm = pair.image.norm(dim=-1, keepdim=True)
    if bool((img_norm == 0).any()):
        raise ZeroNormError("image embedding with zero norm")
    txt_norm = pair.text.norm(dim=-1, keepdim=True)
    if bool((txt_norm == 0).any()):
        raise ZeroNormError("text embedding with zero norm")
    return torch.einsum("hwd,nd->hwn", pair.image / img_norm, pair.text / txt_norm)


def correlation(pair: EmbeddingPair, lift: CorrelationLift) -> CorrelationVolume:
    return CorrelationVolume(lift(cosine_map(pair)), Stage.RAW)


def select_tokens(sal: SaliencyStack | torch.Tensor, k: int) -> TokenPartition:
    """Per class, the k most salient tokens become foreground; ties go to the lowest token index."""
    maps = sal.maps if isinstance(sal, SaliencyStack) else sal
    scores = maps.detach().reshape(-1, maps.shape[-1])
    n_tok = scores.shape[0]
    if not 1 <= k <= n_tok:
        raise ValidationError(f"k must lie in [1, {n_tok}], got {k}")
    # stable descending sort keeps equal scores in ascending index order
    order = torch.sort(scores, dim=0, descending=True, stable=True).indices
    fg = torch.zeros_like(scores, dtype=torch.bool)
    fg.scatter_(0, order[:k], True)
    return TokenPartition(fg, k, TiePolicy.LOWEST_INDEX)


def split_volume(corr: CorrelationVolume, part: TokenPartition) -> tuple[CorrelationVolume, CorrelationVolume]:
    """Zero-filled foreground and background copies of ``corr``; they sum back to ``corr``."""
    corr.require(Stage.RAW)
    h, w, n, _ = corr.shape
    if tuple(part.fg_mask.shape) != (h * w, n):
        raise ShapeError(f"partition {tuple(part.fg_mask.shape)} does not match volume {corr.shape}")
    fg = part.fg_mask.reshape(h, w, n, 1)
    zero = corr.values.new_zeros(())
    return (CorrelationVolume(torch.where(fg, corr.values, zero), Stage.RAW),
            CorrelationVolume(torch.where(fg, zero, corr.values), Stage.RAW))
