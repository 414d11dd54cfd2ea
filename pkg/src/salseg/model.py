"""The full segmentation network and its ablation variants."""

from __future__ import annotations

import enum
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .aggregate import (
    AttentionMerge,
    GatedAggregator,
    UpsampleDecoder,
    aggregate,
    attn_aggregate,
    decode,
    hard_aggregate,
    make_smoothing,
    smooth,
)
from .core import (
    Branch,
    CorrelationVolume,
    EmbeddingPair,
    PipelineConfig,
    SegmentationOutput,
    Stage,
    TaxonomyError,
    TokenPartition,
    parse_flat,
    validate_config,
)
from .hrm import BranchRefiner
from .sdm import (
    CorrelationLift,
    CrossAttentionStack,
    ItmHead,
    correlation,
    cross_attend,
    itm_loss,
    itm_objective,
    matching_score_objective,
    one_hot_match,
    saliency,
    select_tokens,
    split_volume,
)


class Disentangle(str, enum.Enum):
    SALIENCY = "saliency"  # top-k by gradient-weighted attention (the full model)
    NONE = "none"  # one branch over all tokens
    TOKEN = "token"  # top-k by a per-token fg predictor trained with fg/bg targets
    CLASS = "class"  # whole classes routed to a branch by a fixed taxonomy


class Aggregation(str, enum.Enum):
    WEIGHTED = "weighted"
    HARD = "hard"
    ATTN = "attn"


@dataclass(frozen=True)
class ModelVariant:
    disentangle: Disentangle = Disentangle.SALIENCY
    pixel: bool = True
    category: bool = True
    semantic: bool = True
    aggregation: Aggregation = Aggregation.WEIGHTED
    gate_per_channel: bool = True
    saliency_per_class: bool = True
    fg_classes: Optional[tuple[str, ...]] = None  # taxonomy for Disentangle.CLASS
    n_refine_heads: int = 4

    def __post_init__(self):
        object.__setattr__(self, "disentangle", Disentangle(self.disentangle))
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))


def load_taxonomy(path, class_names) -> tuple[str, ...]:
    """Flat ``class = fg|bg`` file -> names of foreground classes; every class must appear."""
    raw = parse_flat(Path(path).read_text())
    missing = [c for c in class_names if c not in raw]
    if missing:
        raise TaxonomyError(f"taxonomy does not cover classes: {', '.join(missing)}")
    bad = {k: v for k, v in raw.items() if v not in ("fg", "bg")}
    if bad:
        raise TaxonomyError(f"taxonomy values must be 'fg' or 'bg': {bad}")
    return tuple(c for c in class_names if raw[c] == "fg")


@dataclass
class ForwardResult:
    output: SegmentationOutput
    partition: Optional[TokenPartition] = None
    saliency: Optional[torch.Tensor] = None  # [H, W, N_C]
    attention: Optional[torch.Tensor] = None  # [HW, N_C]
    itm_loss: Optional[torch.Tensor] = None
    aux_loss: Optional[torch.Tensor] = None
    timings: dict = field(default_factory=dict)


class SegModel(nn.Module):
    """Correlation volume -> saliency split -> per-branch refinement -> merge -> decoder."""

    def __init__(self, cfg: PipelineConfig, variant: ModelVariant = ModelVariant()):
        super().__init__()
        self.cfg = validate_config(cfg)
        self.variant = variant
        d, ws, heads = cfg.d_corr, cfg.window_size, variant.n_refine_heads
        dis = variant.disentangle
        self.lift = CorrelationLift(d)
        if dis is Disentangle.SALIENCY:
            self.cross_attn = CrossAttentionStack(cfg.d_enc, cfg.d_attn, cfg.n_attn_heads, cfg.n_attn_layers)
            self.itm_head = ItmHead(cfg.n_tokens)
        if dis is Disentangle.TOKEN:
            self.token_head = nn.Linear(d, 1)
        refiner = lambda: BranchRefiner(d, ws, variant.pixel, variant.category, variant.semantic, heads)  # noqa: E731
        if dis is Disentangle.NONE:
            self.refine_all = refiner()
        else:
            self.refine_fg = refiner()
            self.refine_bg = refiner()
        if dis in (Disentangle.SALIENCY, Disentangle.TOKEN):
            if variant.aggregation is Aggregation.WEIGHTED:
                self.aggregator = GatedAggregator(cfg.n_classes, d, variant.gate_per_channel)
            elif variant.aggregation is Aggregation.ATTN:
                self.merge = AttentionMerge(d)
        self.smoothing = make_smoothing(d, ws, heads)
        self.decoder = UpsampleDecoder(d, cfg.d_enc)
        self.trace: Optional[list] = None

    # ------------------------------------------------------------------
    def _log(self, name: str) -> None:
        if self.trace is not None:
            self.trace.append(name)

    @contextmanager
    def tracing(self):
        self.trace = []
        try:
            yield self.trace
        finally:
            self.trace = None

    # ------------------------------------------------------------------
    def forward(self, pair: EmbeddingPair, guidance, present: Optional[torch.Tensor] = None,
                gt_grid: Optional[torch.Tensor] = None, itm_pairs: Optional[torch.Tensor] = None,
                timed: bool = False) -> ForwardResult:
        """Run the network.

        ``present`` (bool [N_C]) switches saliency to the training objective and
        enables the ITM loss; without it the label-free matching-score objective is
        used.  ``gt_grid`` is only read by the token-level variant's auxiliary loss.
        """
        cfg, var = self.cfg, self.variant
        h, w = pair.grid
        timings: dict[str, float] = {}
        clock = time.perf_counter if timed else (lambda: 0.0)
        t0 = clock()
        res = ForwardResult(output=None)

        corr = correlation(pair, self.lift)
        self._log("correlation")
        part = None
        if var.disentangle is Disentangle.SALIENCY:
            ts = clock()
            attn = cross_attend(pair, self.cross_attn)
            self._log("cross_attend")
            if present is not None:
                labels = one_hot_match(present)
                objective = itm_objective(self.itm_head, labels, var.saliency_per_class, itm_pairs)
                res.itm_loss = itm_loss(attn, labels, self.itm_head, itm_pairs)
                self._log("itm_loss")
            else:
                objective = matching_score_objective(self.itm_head)
            sal = saliency(attn, objective, (h, w))
            self._log("saliency")
            part = select_tokens(sal, cfg.k_fg)
            self._log("select_tokens")
            timings["saliency"] = clock() - ts
            res.saliency, res.attention = sal.maps, attn.values.detach()
        elif var.disentangle is Disentangle.TOKEN:
            fg_logit = self.token_head(corr.values)[..., 0]  # [H, W, N]
            part = select_tokens(torch.sigmoid(fg_logit), cfg.k_fg)
            self._log("select_tokens")
            res.saliency = torch.sigmoid(fg_logit).detach()
            if gt_grid is not None:
                target = F.one_hot(gt_grid.long(), cfg.n_classes).to(fg_logit.dtype)
                res.aux_loss = F.binary_cross_entropy_with_logits(fg_logit, target)
        res.partition = part

        if var.disentangle is Disentangle.NONE:
            merged = self.refine_all(corr, None, Branch.ALL, self.trace).values
            self._log("smooth")
        elif var.disentangle is Disentangle.CLASS:
            merged = self._class_level(corr, pair)
            self._log("smooth")
        else:
            c_f, c_b = split_volume(corr, part)
            self._log("split_volume")
            c_f2 = self.refine_fg(c_f, part, Branch.FOREGROUND, self.trace)
            c_b2 = self.refine_bg(c_b, part, Branch.BACKGROUND, self.trace)
            if var.aggregation is Aggregation.WEIGHTED:
                agg = aggregate(c_f2, c_b2, part, self.aggregator, self.smoothing)
            elif var.aggregation is Aggregation.HARD:
                agg = hard_aggregate(c_f2, c_b2, part, self.smoothing)
            else:
                agg = attn_aggregate(c_f2, c_b2, part, self.merge, self.smoothing)
            self._log(f"aggregate[{var.aggregation.value}]")
        if var.disentangle in (Disentangle.NONE, Disentangle.CLASS):
            agg = CorrelationVolume(smooth(merged, self.smoothing), Stage.AGGREGATED)

        res.output = decode(agg, pair, guidance, self.decoder)
        self._log("decode")
        timings["total"] = clock() - t0
        res.timings = timings
        return res

    def _class_level(self, corr: CorrelationVolume, pair: EmbeddingPair) -> torch.Tensor:
        fg_names = set(self.variant.fg_classes or ())
        unknown = fg_names - set(pair.class_names)
        if unknown:
            raise TaxonomyError(f"taxonomy names unknown classes: {sorted(unknown)}")
        is_fg = torch.tensor([c in fg_names for c in pair.class_names])
        out = torch.zeros_like(corr.values)
        for flag, refiner, branch in ((True, self.refine_fg, Branch.FOREGROUND),
                                      (False, self.refine_bg, Branch.BACKGROUND)):
            idx = torch.nonzero(is_fg == flag).flatten()
            if len(idx) == 0:
                continue
            sub = CorrelationVolume(corr.values[:, :, idx], Stage.RAW)
            out[:, :, idx] = refiner(sub, None, Branch.ALL, self.trace).values
            self._log(f"class_branch[{branch.value}]")
        return out

    @torch.no_grad()
    def predict(self, pair: EmbeddingPair, guidance) -> SegmentationOutput:
        """Label-free inference."""
        return self.forward(pair, guidance).output
