"""
One scene through the pipeline, stage by stage
==============================================

Builds a synthetic scene, then calls each stage by hand: cosine correlation,
cross-attention, label-free saliency, top-k split, per-branch refinement,
gated merge and decoding.  Shapes are printed along the way.
"""

import os
from pathlib import Path

import torch

from salseg import viz
from salseg.aggregate import aggregate, decode
from salseg.core import Branch, PipelineConfig
from salseg.encoders import DatasetSpec, SceneDataset
from salseg.sdm import (correlation, cosine_map, cross_attend, matching_score_objective, saliency,
                        select_tokens, split_volume)
from salseg.training import build_model

out = Path(os.environ.get("SALSEG_OUTPUT_ROOT", "demo_out")) / "walkthrough"
out.mkdir(parents=True, exist_ok=True)

cfg = PipelineConfig()
model = build_model(cfg)
ds = SceneDataset(DatasetSpec(n_scenes=4, fg_confusability=0.3, noise_sigma=0.1))
pair, guidance = ds.inputs(0)
h, w = pair.grid
print("image embeddings", tuple(pair.image.shape), "text embeddings", tuple(pair.text.shape))

###############################################################################
# Correlation volume: one cosine per (token, class), lifted to D channels.
corr = correlation(pair, model.lift)
print("correlation", corr.shape, corr.stage.name)

###############################################################################
# Saliency from the predicted matching score; no labels are involved.
with torch.no_grad():
    attn = cross_attend(pair, model.cross_attn)
sal = saliency(attn, matching_score_objective(model.itm_head), (h, w))
part = select_tokens(sal, cfg.k_fg)
print("saliency", tuple(sal.maps.shape), "foreground per class", part.fg_mask.sum(0).tolist())

###############################################################################
# Split and refine each branch; masked tokens pass through untouched.
c_f, c_b = split_volume(corr, part)
assert torch.equal(c_f.values + c_b.values, corr.values)
with torch.no_grad():
    c_f2 = model.refine_fg(c_f, part, Branch.FOREGROUND)
    c_b2 = model.refine_bg(c_b, part, Branch.BACKGROUND)
    merged = aggregate(c_f2, c_b2, part, model.aggregator, model.smoothing)
    seg = decode(merged, pair, guidance, model.decoder)
print("refined", c_f2.shape, c_f2.stage.name, "-> merged", merged.stage.name)
print("logits", tuple(seg.logits.shape), "(4x the token grid)")

###############################################################################
# Figures: the raw cosine, the saliency and the split for class 1.
cls = 1
viz.save_panel([
    ("cosine", cosine_map(pair)[:, :, cls].numpy(), "heat"),
    ("saliency", sal.maps[:, :, cls].numpy(), "heat"),
    ("foreground tokens", part.grid_mask(h, w)[:, :, cls].numpy().astype(float), "heat"),
], out / "walkthrough.png", title="untrained model, class 1")
print("figure written to", out / "walkthrough.png")
