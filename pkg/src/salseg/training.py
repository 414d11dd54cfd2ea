"""Training loop, checkpoints, mIoU evaluation, ablation suites and efficiency accounting."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    ConfigError,
    DivergenceError,
    PipelineConfig,
    TaxonomyError,
    validate_config,
)
from .encoders import DatasetSpec, SceneDataset
from .model import Aggregation, Disentangle, ModelVariant, SegModel
from .sdm import sample_itm_pairs

log = logging.getLogger(__name__)

FULL_SCALE_TOKENS = 24 * 24
FULL_SCALE_K_SWEEP = (16, 48, 96)


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 600
    batch_size: int = 2
    lr_main: float = 1e-3
    lr_encoder: float = 2e-6  # kept for parity; synthetic encoders are frozen
    weight_decay: float = 1e-4
    warmup_frac: float = 0.1
    min_lr_ratio: float = 0.0
    ce_weight: float = 1.0
    itm_weight: Optional[float] = None  # None -> PipelineConfig.itm_weight
    aux_weight: float = 0.2  # token-level variant's fg/bg supervision
    checkpoint_every: int = 0
    eval_every: int = 0
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.total_iters <= 0 or self.batch_size <= 0:
            raise ConfigError("total_iters and batch_size must be positive")
        if self.lr_main < 0 or self.lr_encoder < 0 or self.weight_decay < 0:
            raise ConfigError("learning rates and weight decay must be non-negative")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("warmup_frac must lie in [0, 1)")
        if self.itm_weight is not None and self.itm_weight < 0:
            raise ConfigError("itm_weight must be >= 0")


def warmup_cosine(step: int, total: int, warmup_frac: float, min_ratio: float = 0.0) -> float:
    """LR multiplier: linear warmup to 1, then cosine decay to ``min_ratio``."""
    warm = int(math.ceil(warmup_frac * total))
    if step < warm:
        return (step + 1) / warm
    span = max(total - warm, 1)
    progress = min((step - warm) / span, 1.0)
    return min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# model construction and checkpoints
# --------------------------------------------------------------------------

def build_model(cfg: PipelineConfig, variant: ModelVariant = ModelVariant()) -> SegModel:
    torch.manual_seed(cfg.seed)
    return SegModel(cfg, variant)


def _variant_dict(v: ModelVariant) -> dict:
    d = asdict(v)
    d["disentangle"] = v.disentangle.value
    d["aggregation"] = v.aggregation.value
    d["fg_classes"] = list(v.fg_classes) if v.fg_classes is not None else None
    return d


def _variant_from_dict(d: dict) -> ModelVariant:
    d = dict(d)
    if d.get("fg_classes") is not None:
        d["fg_classes"] = tuple(d["fg_classes"])
    return ModelVariant(**d)


@dataclass
class Checkpoint:
    iteration: int
    tensors: dict[str, np.ndarray]
    pipeline: dict
    variant: dict
    train: Optional[dict] = None
    rng: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: SegModel, iteration: int = 0, train_cfg: Optional[TrainConfig] = None,
                   generator: Optional[torch.Generator] = None) -> "Checkpoint":
        tensors = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        rng = {"torch": torch.get_rng_state().numpy().copy()}
        if generator is not None:
            rng["sampler"] = generator.get_state().numpy().copy()
        return cls(iteration, tensors, asdict(model.cfg), _variant_dict(model.variant),
                   asdict(train_cfg) if train_cfg else None, rng)

    def save(self, path: str | Path, force: bool = False) -> Path:
        """Write ``tensors.npz`` and ``manifest.json`` into directory ``path``."""
        path = Path(path)
        if (path / "manifest.json").exists() and not force:
            raise FileExistsError(f"checkpoint exists at {path}; pass force=True to overwrite")
        path.mkdir(parents=True, exist_ok=True)
        arrays = dict(self.tensors)
        arrays.update({f"rng.{k}": v for k, v in self.rng.items()})
        np.savez(path / "tensors.npz", **arrays)
        manifest = {
            "iteration": self.iteration,
            "tensors": {k: {"dtype": str(v.dtype), "shape": list(v.shape)} for k, v in self.tensors.items()},
            "rng": sorted(self.rng),
            "pipeline": self.pipeline,
            "variant": self.variant,
            "train": self.train,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        with np.load(path / "tensors.npz", allow_pickle=False) as z:
            tensors = {k: z[k] for k in manifest["tensors"]}
            rng = {k: z[f"rng.{k}"] for k in manifest["rng"]}
        for k, meta in manifest["tensors"].items():
            if list(tensors[k].shape) != meta["shape"] or str(tensors[k].dtype) != meta["dtype"]:
                raise ValueError(f"checkpoint tensor {k} disagrees with its manifest entry")
        return cls(manifest["iteration"], tensors, manifest["pipeline"], manifest["variant"],
                   manifest["train"], rng)

    def build(self) -> SegModel:
        cfg = validate_config(PipelineConfig(**self.pipeline))
        model = SegModel(cfg, _variant_from_dict(self.variant))
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()})
        return model

    def n_parameters(self) -> int:
        return sum(int(v.size) for v in self.tensors.values())


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def confusion_counts(pred: torch.Tensor, gt: torch.Tensor, n_classes: int) -> np.ndarray:
    """``[n_classes, 3]`` array of (TP, FP, FN) counts."""
    pred = pred.flatten().long()
    gt = gt.flatten().long()
    tp = torch.bincount(gt[pred == gt], minlength=n_classes)
    pred_count = torch.bincount(pred, minlength=n_classes)
    gt_count = torch.bincount(gt, minlength=n_classes)
    return torch.stack([tp, pred_count - tp, gt_count - tp], dim=1).numpy()


def iou_from_counts(counts: np.ndarray) -> tuple[list[Optional[float]], float]:
    per_class: list[Optional[float]] = []
    for tp, fp, fn in counts:
        denom = tp + fp + fn
        per_class.append(None if denom == 0 else float(tp) / float(denom))
    valid = [v for v in per_class if v is not None]
    return per_class, (float(np.mean(valid)) if valid else float("nan"))


def mean_iou(pred: torch.Tensor, gt: torch.Tensor, n_classes: int) -> tuple[list[Optional[float]], float]:
    return iou_from_counts(confusion_counts(pred, gt, n_classes))


def predict_dataset(model: SegModel, dataset: SceneDataset, indices: Optional[Iterable[int]] = None) -> dict[int, torch.Tensor]:
    """Label-free inference over the dataset; only ``dataset.inputs`` is touched."""
    model.eval()
    indices = range(len(dataset)) if indices is None else indices
    return {i: model.predict(*dataset.inputs(i)).mask for i in indices}


def evaluate(model: SegModel, dataset: SceneDataset, indices: Optional[Iterable[int]] = None) -> dict:
    """Per-class IoU and mIoU at output resolution, from counts summed over all scenes."""
    was_training = model.training
    preds = predict_dataset(model, dataset, indices)
    counts = np.zeros((model.cfg.n_classes, 3), dtype=np.int64)
    for i, pred in preds.items():
        counts += confusion_counts(pred, dataset.labels(i)[1], model.cfg.n_classes)
    per_class, miou = iou_from_counts(counts)
    model.train(was_training)
    return {"per_class": per_class, "mIoU": miou, "counts": counts}


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    model: SegModel

    def log_text(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log)


def train(model: SegModel, dataset: DatasetSpec | SceneDataset, cfg: TrainConfig = TrainConfig(),
          eval_dataset: Optional[SceneDataset] = None, checkpoint_dir: Optional[str | Path] = None) -> TrainResult:
    """AdamW + warmup-cosine on ``ce_weight * CE + itm_weight * L_itm (+ aux_weight * aux)``.

    Deterministic for a fixed model init and ``cfg.seed``.
    """
    ds = dataset if isinstance(dataset, SceneDataset) else SceneDataset(dataset)
    if ds.spec.n_classes != model.cfg.n_classes or ds.spec.grid != model.cfg.grid_h:
        raise ConfigError("dataset classes/grid do not match the model config")
    eval_ds = eval_dataset or ds
    itm_w = model.cfg.itm_weight if cfg.itm_weight is None else cfg.itm_weight
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr_main, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: warmup_cosine(s, cfg.total_iters, cfg.warmup_frac, cfg.min_lr_ratio))
    records: list[dict] = []
    model.train()

    for it in range(1, cfg.total_iters + 1):
        idx = torch.randint(len(ds), (cfg.batch_size,), generator=gen).tolist()
        ce_sum = itm_sum = aux_sum = 0.0
        ce_terms, itm_terms, aux_terms, n_pairs = [], [], [], 0
        for i in idx:
            pair, guidance = ds.inputs(i)
            gt_grid, gt_full = ds.labels(i)
            present = torch.bincount(gt_full.flatten(), minlength=model.cfg.n_classes) > 0
            pairs = sample_itm_pairs(present, gen)
            res = model(pair, guidance, present=present, gt_grid=gt_grid, itm_pairs=pairs)
            logits = res.output.logits.permute(2, 0, 1).unsqueeze(0)
            ce_terms.append(F.cross_entropy(logits, gt_full.unsqueeze(0)))
            if res.itm_loss is not None:
                itm_terms.append(res.itm_loss * len(pairs))
                n_pairs += len(pairs)
            if res.aux_loss is not None:
                aux_terms.append(res.aux_loss)
        loss_ce = torch.stack(ce_terms).mean()
        loss_itm = torch.stack(itm_terms).sum() / n_pairs if itm_terms else loss_ce.new_zeros(())
        loss_aux = torch.stack(aux_terms).mean() if aux_terms else loss_ce.new_zeros(())
        total = cfg.ce_weight * loss_ce + itm_w * loss_itm + cfg.aux_weight * loss_aux

        if not bool(torch.isfinite(total)):
            ckpt = Checkpoint.from_model(model, it - 1, cfg, gen)
            if checkpoint_dir is not None:
                ckpt.save(Path(checkpoint_dir) / "diverged", force=True)
            err = DivergenceError(f"non-finite loss at iteration {it}")
            err.checkpoint = ckpt
            raise err

        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        sched.step()

        do_eval = cfg.eval_every and (it % cfg.eval_every == 0 or it == cfg.total_iters)
        if do_eval or (cfg.log_every and it % cfg.log_every == 0) or it == cfg.total_iters:
            rec = {
                "iteration": it,
                "loss_total": float(total.detach()),
                "loss_ce": float(loss_ce.detach()),
                "loss_itm": float(loss_itm.detach()),
                "loss_aux": float(loss_aux.detach()),
                "lr": float(sched.get_last_lr()[0]),
                "mIoU": None,
            }
            if do_eval:
                rec["mIoU"] = evaluate(model, eval_ds)["mIoU"]
                model.train()
            records.append(rec)
            log.debug("iter %d loss %.4f", it, rec["loss_total"])
        if checkpoint_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            Checkpoint.from_model(model, it, cfg, gen).save(Path(checkpoint_dir) / f"iter_{it:06d}", force=True)

    model.eval()
    return TrainResult(Checkpoint.from_model(model, cfg.total_iters, cfg, gen), records, model)


# --------------------------------------------------------------------------
# ablations
# --------------------------------------------------------------------------

DISENTANGLEMENT_VARIANTS = {
    "I": ("no disentanglement", dict(disentangle=Disentangle.NONE)),
    "II": ("token-level", dict(disentangle=Disentangle.TOKEN)),
    "III": ("class-level", dict(disentangle=Disentangle.CLASS)),
    "IV": ("w/o HRM", dict(pixel=False, category=False, semantic=False)),
    "V": ("(IV) + pixel", dict(pixel=True, category=False, semantic=False)),
    "VI": ("(IV) + category", dict(pixel=False, category=True, semantic=False)),
    "VII": ("(V) + category", dict(pixel=True, category=True, semantic=False)),
    "VIII": ("full", dict()),
}

AGGREGATION_VARIANTS = {
    "I": ("attention aggregation", dict(aggregation=Aggregation.ATTN)),
    "II": ("hard aggregation", dict(aggregation=Aggregation.HARD)),
    "III": ("weighted aggregation", dict(aggregation=Aggregation.WEIGHTED)),
}


def k_sweep_values(n_tokens: int) -> list[int]:
    """Foreground counts with the same token ratios as k = 16/48/96 on a 24x24 grid."""
    return [max(1, round(k * n_tokens / FULL_SCALE_TOKENS)) for k in FULL_SCALE_K_SWEEP]


def ablation_plan(suite: str, cfg: PipelineConfig, base: ModelVariant = ModelVariant(),
                  fg_classes: Optional[Sequence[str]] = None,
                  variants: Optional[Sequence[str]] = None) -> list[tuple[str, str, PipelineConfig, ModelVariant]]:
    """(id, description, pipeline config, model variant) for every run in ``suite``."""
    plan = []
    if suite == "disentanglement":
        for vid, (desc, over) in DISENTANGLEMENT_VARIANTS.items():
            if variants is not None and vid not in variants:
                continue
            if vid == "III":
                if fg_classes is None:
                    log.warning("skipping class-level variant (III): no taxonomy supplied")
                    continue
                over = dict(over, fg_classes=tuple(fg_classes))
            plan.append((vid, desc, cfg, dataclasses.replace(base, **over)))
    elif suite == "k_sweep":
        for vid, k in zip(("I", "II", "III"), k_sweep_values(cfg.n_tokens)):
            plan.append((vid, f"k={k} ({100 * k / cfg.n_tokens:.0f}% of tokens)",
                         dataclasses.replace(cfg, k_fg=k), base))
    elif suite == "aggregation":
        for vid, (desc, over) in AGGREGATION_VARIANTS.items():
            if variants is None or vid in variants:
                plan.append((vid, desc, cfg, dataclasses.replace(base, **over)))
    else:
        raise ValueError(f"unknown ablation suite {suite!r}; expected disentanglement, k_sweep or aggregation")
    return plan


def run_ablation(suite: str, cfg: PipelineConfig, data: DatasetSpec, train_cfg: TrainConfig,
                 seeds: Sequence[int] = (0,), base: ModelVariant = ModelVariant(),
                 fg_classes: Optional[Sequence[str]] = None, eval_data: Optional[DatasetSpec] = None,
                 variants: Optional[Sequence[str]] = None) -> list[dict]:
    """Train and evaluate every variant of ``suite`` for each seed; one row per variant."""
    if fg_classes is not None:
        missing = set(fg_classes) - set(data.class_names)
        if missing:
            raise TaxonomyError(f"taxonomy names unknown classes: {sorted(missing)}")
    rows = []
    for vid, desc, vcfg, variant in ablation_plan(suite, cfg, base, fg_classes, variants):
        scores = []
        for seed in seeds:
            run_cfg = dataclasses.replace(vcfg, seed=seed)
            train_ds = SceneDataset(dataclasses.replace(data, seed=seed))
            test_ds = SceneDataset(dataclasses.replace(eval_data or data, seed=(eval_data or data).seed + seed))
            model = build_model(run_cfg, variant)
            result = train(model, train_ds, dataclasses.replace(train_cfg, seed=seed, eval_every=0))
            scores.append(evaluate(result.model, test_ds)["mIoU"])
        rows.append({
            "suite": suite,
            "variant": vid,
            "description": desc,
            "k_fg": vcfg.k_fg,
            "seeds": " ".join(str(s) for s in seeds),
            "mIoU_mean": float(np.mean(scores)),
            "mIoU_per_seed": " ".join(f"{s:.6f}" for s in scores),
        })
        log.info("%s %s: mIoU %.4f", suite, vid, rows[-1]["mIoU_mean"])
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------
# efficiency
# --------------------------------------------------------------------------

def _linear(i: int, o: int, bias: bool = True) -> int:
    return i * o + (o if bias else 0)


def _window_block_params(d: int) -> int:
    return 2 * d + _linear(d, 3 * d) + _linear(d, d) + 2 * d + _linear(d, 2 * d) + _linear(2 * d, d)


def analytic_param_count(cfg: PipelineConfig, variant: ModelVariant = ModelVariant(), d_guide: int = 16,
                         itm_hidden: int = 64) -> int:
    """Closed-form parameter count of ``SegModel(cfg, variant)``."""
    d, a, e, n = cfg.d_corr, cfg.d_attn, cfg.d_enc, cfg.n_classes
    total = _linear(1, d)  # correlation lift
    if variant.disentangle is Disentangle.SALIENCY:
        full_layer = 4 * a + 2 * a * a + a * a + _linear(a, a) + 2 * a + _linear(a, 2 * a) + _linear(2 * a, a)
        final_layer = 4 * a + 2 * a * a
        total += e * a + (cfg.n_attn_layers - 1) * full_layer + final_layer
        total += _linear(cfg.n_tokens, itm_hidden) + _linear(itm_hidden, 2)
    if variant.disentangle is Disentangle.TOKEN:
        total += _linear(d, 1)
    refiner = 0
    mlp = lambda i, o: _linear(i, d) + _linear(d, o)  # noqa: E731
    if variant.pixel:
        refiner += 2 * _window_block_params(d)
    if variant.category:
        refiner += 2 * mlp(d, d) + mlp(2 * d, d)
    if variant.semantic:
        refiner += 2 * mlp(d, d)
    total += refiner * (1 if variant.disentangle is Disentangle.NONE else 2)
    if variant.disentangle in (Disentangle.SALIENCY, Disentangle.TOKEN):
        if variant.aggregation is Aggregation.WEIGHTED:
            total += n * (d if variant.gate_per_channel else 1)
        elif variant.aggregation is Aggregation.ATTN:
            total += d + _linear(d, d)
    total += 2 * _window_block_params(d)  # smoothing
    up = lambda g_in: _linear(g_in, d_guide) + (d + d_guide) * d * 4 + d  # noqa: E731
    total += up(2 * e) + up(e) + _linear(d, 1)
    return total


def mac_estimate(cfg: PipelineConfig, variant: ModelVariant = ModelVariant(), d_guide: int = 16,
                 itm_hidden: int = 64) -> dict[str, int]:
    """Multiply-accumulate counts per forward pass, by component (bias adds ignored).

    ``mlp`` collects every dense layer acting on D-wide correlation features
    (window-block qkv/proj/MLP and the prototype/gate MLPs); it scales exactly as D^2.
    """
    d, a, e, n = cfg.d_corr, cfg.d_attn, cfg.d_enc, cfg.n_classes
    hw = cfg.n_tokens
    ws = cfg.window_size
    hp = math.ceil(cfg.grid_h / ws) * ws
    wp = math.ceil(cfg.grid_w / ws) * ws
    tp = hp * wp  # padded tokens per class
    macs = {"correlation": hw * n * e + hw * n * d}
    n_branches = 1 if variant.disentangle is Disentangle.NONE else 2
    blocks = 2 * n_branches * int(variant.pixel) + 2  # + smoothing
    macs["mlp"] = blocks * n * tp * (3 * d * d + d * d + 4 * d * d)
    macs["window_attention"] = blocks * n * tp * ws * ws * 2 * d
    if variant.category:
        proto = n * (2 * 2 * d * d) + n * (2 * d * d + d * d)
        if variant.semantic:
            proto += 2 * 2 * d * d
        macs["mlp"] += n_branches * proto
    if variant.disentangle is Disentangle.SALIENCY:
        layers = cfg.n_attn_layers
        per = n * a * a + hw * a * a + n * hw * a
        full = per + hw * a * a + n * hw * a + n * a * a + n * 4 * a * a
        macs["cross_attention"] = (hw + n) * e * a + (layers - 1) * full + per
        # forward + one backward through the head for the saliency gradient
        macs["itm"] = 2 * n * (hw * itm_hidden + itm_hidden * 2)
    g = 4 * hw * (2 * e * d_guide) + 16 * hw * (e * d_guide)
    up = n * hw * (d + d_guide) * d * 4 + n * 4 * hw * (d + d_guide) * d * 4
    macs["decoder"] = g + up + n * 16 * hw * d
    macs["total"] = sum(macs.values())
    return macs


def efficiency_report(model: SegModel, sample, n_runs: int = 20) -> dict:
    """Parameter count, MAC estimate, and median wall time per forward with the saliency share."""
    pair, guidance = sample
    model.eval()
    totals, sal = [], []
    with torch.no_grad():
        model(pair, guidance)  # warm-up
        for _ in range(max(n_runs, 20)):
            t = model(pair, guidance, timed=True).timings
            totals.append(t["total"])
            sal.append(t.get("saliency", 0.0))
    wall = statistics.median(totals)
    sal_med = statistics.median(sal)
    return {
        "params_analytic": analytic_param_count(model.cfg, model.variant),
        "params_enumerated": sum(p.numel() for p in model.state_dict().values()),
        "macs": mac_estimate(model.cfg, model.variant),
        "wall_median_s": wall,
        "saliency_median_s": sal_med,
        "saliency_fraction": sal_med / wall if wall > 0 else float("nan"),
        "n_runs": len(totals),
    }
