"""Hierarchical refinement of one branch's correlation volume.

Three levels, each optional for ablations:

* pixel: masked window attention, a plain block followed by a shifted one,
  run per class over the token grid; tokens outside the branch are neither
  attended to nor updated;
* category: average- and max-pooled channel descriptors per class (over the
  branch's tokens only), each through its own MLP and summed;
* semantic: the same dual pooling across the class axis of the category
  prototypes, giving one class-agnostic descriptor per branch.

The prototypes drive a per-class, per-channel sigmoid gate on the volume.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .core import (
    Branch,
    CorrelationVolume,
    EmptyBranchError,
    MaskError,
    PrototypeSet,
    ShapeError,
    Stage,
    TokenPartition,
)


def shift_region_ids(size: int, window: int, shift: int, device=None) -> torch.Tensor:
    """Region label of each (rolled) row so wrapped-around rows never share attention."""
    ids = torch.zeros(size, dtype=torch.long, device=device)
    if shift:
        ids[size - window:size - shift] = 1
        ids[size - shift:] = 2
    return ids


class WindowAttentionBlock(nn.Module):
    """Pre-norm window self-attention + MLP on a ``[B, H, W, D]`` grid with a token mask.

    Invisible tokens contribute no keys and are copied to the output unchanged.
    """

    def __init__(self, dim: int, window_size: int, shift: bool = False, n_heads: int = 4,
                 mlp_ratio: int = 2):
        super().__init__()
        if dim % n_heads:
            n_heads = 1
        self.dim = dim
        self.window_size = window_size
        self.shift = window_size // 2 if shift and window_size > 1 else 0
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def identity_(self) -> "WindowAttentionBlock":
        """Zero both residual branches so the block computes the identity."""
        with torch.no_grad():
            for lin in (self.proj, self.mlp[2]):
                lin.weight.zero_()
                lin.bias.zero_()
        return self

    def _partition(self, t: torch.Tensor) -> torch.Tensor:
        # [B, Hp, Wp, ...] -> [B * nW, ws*ws, ...]
        b, hp, wp = t.shape[:3]
        ws = self.window_size
        rest = t.shape[3:]
        t = t.reshape(b, hp // ws, ws, wp // ws, ws, *rest).transpose(2, 3)
        return t.reshape(b * (hp // ws) * (wp // ws), ws * ws, *rest)

    def _merge(self, t: torch.Tensor, b: int, hp: int, wp: int) -> torch.Tensor:
        ws = self.window_size
        rest = t.shape[2:]
        t = t.reshape(b, hp // ws, wp // ws, ws, ws, *rest).transpose(2, 3)
        return t.reshape(b, hp, wp, *rest)

    def forward(self, x: torch.Tensor, visible: Optional[torch.Tensor] = None) -> torch.Tensor:
        b, h, w, d = x.shape
        if visible is None:
            visible = torch.ones(b, h, w, dtype=torch.bool, device=x.device)
        if tuple(visible.shape) != (b, h, w):
            raise MaskError(f"visibility mask {tuple(visible.shape)} does not match grid {(b, h, w)}")
        ws, s = self.window_size, self.shift
        hp, wp = math.ceil(h / ws) * ws, math.ceil(w / ws) * ws
        xp = F.pad(x, (0, 0, 0, wp - w, 0, hp - h))
        vis = F.pad(visible, (0, wp - w, 0, hp - h), value=False)
        if s:
            xp = torch.roll(xp, (-s, -s), dims=(1, 2))
            vis = torch.roll(vis, (-s, -s), dims=(1, 2))
        region = (shift_region_ids(hp, ws, s, x.device)[:, None] * 3
                  + shift_region_ids(wp, ws, s, x.device)[None, :])

        xw = self._partition(xp)  # [B*nW, T, D]
        vw = self._partition(vis)  # [B*nW, T]
        rw = self._partition(region.expand(b, hp, wp))
        allowed = (rw[:, :, None] == rw[:, None, :]) & vw[:, None, :]  # [B*nW, Tq, Tk]

        nwb, t, _ = xw.shape
        dh = d // self.n_heads
        qkv = self.qkv(self.norm1(xw)).reshape(nwb, t, 3, self.n_heads, dh).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]  # [B*nW, heads, T, dh]
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        mask = allowed[:, None]
        logits = logits.masked_fill(~mask, float("-inf"))
        # rows with nothing to attend to belong to invisible queries; keep them finite
        logits = logits.masked_fill(~mask.any(-1, keepdim=True), 0.0)
        probs = torch.softmax(logits, dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(nwb, t, d)
        yw = xw + self.proj(out)
        yw = yw + self.mlp(self.norm2(yw))
        yw = torch.where(vw[..., None], yw, xw)

        y = self._merge(yw, b, hp, wp)
        if s:
            y = torch.roll(y, (s, s), dims=(1, 2))
        return y[:, :h, :w]

    def window_sets(self, h: int, w: int) -> list[frozenset[tuple[int, int]]]:
        """Groups of grid positions that may attend to one another (for structural checks)."""
        ws, s = self.window_size, self.shift
        hp, wp = math.ceil(h / ws) * ws, math.ceil(w / ws) * ws
        groups: dict[tuple, set] = {}
        rh, rw = shift_region_ids(hp, ws, s), shift_region_ids(wp, ws, s)
        for i in range(h):
            for j in range(w):
                ri, rj = (i - s) % hp, (j - s) % wp
                key = (ri // ws, rj // ws, int(rh[ri]), int(rw[rj]))
                groups.setdefault(key, set()).add((i, j))
        return [frozenset(g) for g in groups.values()]


def branch_visibility(part: Optional[TokenPartition], branch: Branch, h: int, w: int, n: int,
                      device=None) -> torch.Tensor:
    """Boolean ``[H, W, N_C]`` map of the tokens owned by ``branch``."""
    if branch is Branch.ALL or part is None:
        return torch.ones(h, w, n, dtype=torch.bool, device=device)
    if tuple(part.fg_mask.shape) != (h * w, n):
        raise ShapeError(f"partition {tuple(part.fg_mask.shape)} does not match grid {(h, w, n)}")
    return part.grid_mask(h, w, foreground=(branch is Branch.FOREGROUND))


def pixel_refine(c_branch: CorrelationVolume, part: Optional[TokenPartition], branch: Branch,
                 blocks) -> CorrelationVolume:
    """Plain then shifted masked window attention, each class refined independently."""
    c_branch.require(Stage.RAW)
    h, w, n, _ = c_branch.shape
    vis = branch_visibility(part, branch, h, w, n, c_branch.values.device).permute(2, 0, 1)
    x = c_branch.values.permute(2, 0, 1, 3)  # classes act as the batch axis
    for blk in blocks:
        x = blk(x, vis)
    return c_branch.advance(x.permute(1, 2, 0, 3), Stage.PIXEL)


def _mlp(dim_in: int, dim_out: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim_in, hidden), nn.ReLU(), nn.Linear(hidden, dim_out))


def category_prototype(c_prime: CorrelationVolume, mlp_avg, mlp_max,
                       visible: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``[1, N_C, D]`` = MLP_avg(mean over visible tokens) + MLP_max(max over visible tokens)."""
    c_prime.require(Stage.PIXEL)
    x = c_prime.values
    h, w, n, d = x.shape
    if visible is None:
        visible = torch.ones(h, w, n, dtype=torch.bool, device=x.device)
    vis = visible.reshape(h * w, n, 1)
    count = vis.sum(0)
    if bool((count == 0).any()):
        empty = torch.nonzero(count.flatten() == 0).flatten().tolist()
        raise EmptyBranchError(f"classes {empty} have no tokens in this branch")
    flat = x.reshape(h * w, n, d)
    avg = torch.where(vis, flat, flat.new_zeros(())).sum(0) / count
    mx = flat.masked_fill(~vis, float("-inf")).max(0).values
    return (mlp_avg(avg) + mlp_max(mx)).unsqueeze(0)


def semantic_prototype(p_c: torch.Tensor, mlp_avg, mlp_max) -> torch.Tensor:
    """``[1, 1, D]`` class-agnostic prototype from dual pooling over the class axis."""
    if p_c.dim() != 3 or p_c.shape[0] != 1:
        raise ShapeError(f"category prototypes must be [1, N_C, D], got {tuple(p_c.shape)}")
    return mlp_avg(p_c.mean(1, keepdim=True)) + mlp_max(p_c.max(1, keepdim=True).values)


def fuse(c_prime: CorrelationVolume, protos: PrototypeSet, gate_mlp) -> CorrelationVolume:
    """``C''_i = C'_i * sigmoid(MLP([P^c_i, P^s]))``, one D-gate per class broadcast over the grid."""
    c_prime.require(Stage.PIXEL)
    h, w, n, d = c_prime.shape
    if protos.category.shape[1:] != (n, d):
        raise ShapeError(f"prototypes {tuple(protos.category.shape)} do not match volume {c_prime.shape}")
    joint = torch.cat([protos.category[0], protos.semantic[0].expand(n, d)], dim=-1)  # [N, 2D]
    gate = torch.sigmoid(gate_mlp(joint))
    if tuple(gate.shape) != (n, d):
        raise ShapeError(f"gate MLP must output [N_C, D], got {tuple(gate.shape)}")
    return c_prime.advance(c_prime.values * gate, Stage.FUSED)


class BranchRefiner(nn.Module):
    """All three refinement levels for one branch, with per-level switches."""

    def __init__(self, d: int, window_size: int, pixel: bool = True, category: bool = True,
                 semantic: bool = True, n_heads: int = 4):
        super().__init__()
        if semantic and not category:
            raise ValueError("semantic refinement pools category prototypes; enable category too")
        self.use_pixel, self.use_category, self.use_semantic = pixel, category, semantic
        if pixel:
            self.blocks = nn.ModuleList([WindowAttentionBlock(d, window_size, False, n_heads),
                                         WindowAttentionBlock(d, window_size, True, n_heads)])
        if category:
            self.cat_avg, self.cat_max = _mlp(d, d, d), _mlp(d, d, d)
            self.gate = _mlp(2 * d, d, d)
        if semantic:
            self.sem_avg, self.sem_max = _mlp(d, d, d), _mlp(d, d, d)

    def forward(self, c_branch: CorrelationVolume, part: Optional[TokenPartition], branch: Branch,
                trace: Optional[list] = None) -> CorrelationVolume:
        h, w, n, _ = c_branch.shape
        if self.use_pixel:
            c1 = pixel_refine(c_branch, part, branch, self.blocks)
            _log(trace, f"pixel_refine[{branch.value}]")
        else:
            c1 = c_branch.advance(c_branch.values, Stage.PIXEL)
        if not self.use_category:
            return c1.advance(c1.values, Stage.FUSED)
        vis = branch_visibility(part, branch, h, w, n, c_branch.values.device)
        p_c = category_prototype(c1, self.cat_avg, self.cat_max, vis)
        _log(trace, f"category_prototype[{branch.value}]")
        if self.use_semantic:
            p_s = semantic_prototype(p_c, self.sem_avg, self.sem_max)
            _log(trace, f"semantic_prototype[{branch.value}]")
        else:
            p_s = p_c.new_zeros(1, 1, p_c.shape[-1])
        out = fuse(c1, PrototypeSet(p_c, p_s, branch), self.gate)
        _log(trace, f"fuse[{branch.value}]")
        return out


def _log(trace: Optional[list], name: str) -> None:
    if trace is not None:
        trace.append(name)
