"""Command-line entry point: ``salseg <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
Every subcommand writes under ``--out`` (default ``$SALSEG_OUTPUT_ROOT`` or
``./salseg_out``), creating it if needed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import viz
from .core import ConfigError, PipelineConfig, SalsegError, from_flat, load_config, to_flat
from .encoders import DatasetSpec, SceneDataset, dataset_digest, generate_scene, load_external_dir
from .model import Aggregation, ModelVariant, load_taxonomy
from .sdm import (
    cosine_map,
    cross_attend,
    matching_score_objective,
    saliency,
    select_tokens,
)
from .training import (
    DISENTANGLEMENT_VARIANTS,
    Checkpoint,
    TrainConfig,
    build_model,
    confusion_counts,
    efficiency_report,
    evaluate,
    iou_from_counts,
    rows_to_csv,
    run_ablation,
    train,
)

log = logging.getLogger("salseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
OUTPUT_ENV = "SALSEG_OUTPUT_ROOT"


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------
# shared helpers
# ----------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "salseg_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pipeline(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _data_spec(path: Optional[str]) -> DatasetSpec:
    """A dataset flat config, or a directory written by ``gen-data``; default desk dataset otherwise."""
    if path is None:
        return DatasetSpec()
    p = Path(path)
    if p.is_dir():
        p = p / "dataset.cfg"
    if not p.exists():
        raise UsageError(f"no dataset config at {p}")
    return from_flat(DatasetSpec, p.read_text())


def _variant(args) -> ModelVariant:
    vid = getattr(args, "variant", "VIII")
    if vid not in DISENTANGLEMENT_VARIANTS:
        raise UsageError(f"unknown variant {vid!r}; choose from {', '.join(DISENTANGLEMENT_VARIANTS)}")
    over = dict(DISENTANGLEMENT_VARIANTS[vid][1])
    if getattr(args, "aggregation", None):
        over["aggregation"] = Aggregation(args.aggregation)
    if vid == "III":
        if not getattr(args, "taxonomy", None):
            raise UsageError("variant III needs --taxonomy")
    return ModelVariant(**over)


def _check_model_matches_data(cfg: PipelineConfig, spec: DatasetSpec) -> None:
    if (cfg.grid_h, cfg.grid_w, cfg.n_classes, cfg.d_enc) != (spec.grid, spec.grid, spec.n_classes, spec.d_enc):
        raise UsageError(f"pipeline config (grid {cfg.grid_h}x{cfg.grid_w}, {cfg.n_classes} classes, d_enc "
                         f"{cfg.d_enc}) does not match dataset (grid {spec.grid}, {spec.n_classes} classes, "
                         f"d_enc {spec.d_enc})")


def _load_checkpoint(path: str) -> Checkpoint:
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise UsageError(f"not a checkpoint directory: {p}")
    return Checkpoint.load(p)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = DatasetSpec(n_scenes=args.n_scenes, n_classes=args.classes, image_size=args.image_size,
                       fg_confusability=args.confusability, noise_sigma=args.noise,
                       seed=args.seed if args.seed is not None else 0, grid=args.grid, d_enc=args.d_enc)
    out = _out_dir(args) / "data"
    if (out / "dataset.cfg").exists() and not args.force:
        raise FileExistsError(f"{out} already holds a dataset; pass --force to overwrite")
    (out / "inputs").mkdir(parents=True, exist_ok=True)
    labels, labels_grid = {}, {}
    for i in range(spec.n_scenes):
        s = generate_scene(spec, i)
        name = f"scene_{i:04d}"
        np.savez(out / "inputs" / f"{name}.npz", image=s.pair.image.numpy(), text=s.pair.text.numpy(),
                 class_names=np.array(spec.class_names), shallow=s.guidance[0].numpy(),
                 deep=s.guidance[1].numpy())
        labels[name] = s.gt_full.numpy()
        labels_grid[name] = s.gt_grid.numpy()
    np.savez(out / "labels.npz", **labels)
    np.savez(out / "labels_grid.npz", **labels_grid)
    (out / "dataset.cfg").write_text(to_flat(spec))
    digest = dataset_digest(spec)
    (out / "digest.txt").write_text(digest + "\n")
    print(f"wrote {spec.n_scenes} scenes to {out} (sha256 {digest[:16]})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _pipeline(args)
    spec = _data_spec(args.data)
    _check_model_matches_data(cfg, spec)
    variant = _variant(args)
    if args.variant == "III":
        variant = dataclasses.replace(variant, fg_classes=load_taxonomy(args.taxonomy, spec.class_names))
    out = _out_dir(args)
    ckpt_dir = out / "checkpoint"
    if (ckpt_dir / "manifest.json").exists() and not args.force:
        raise FileExistsError(f"checkpoint exists at {ckpt_dir}; pass --force to overwrite")
    tcfg = TrainConfig(total_iters=args.iters, batch_size=args.batch, lr_main=args.lr,
                       eval_every=args.eval_every, log_every=args.log_every, seed=cfg.seed)
    model = build_model(cfg, variant)
    result = train(model, SceneDataset(spec), tcfg)
    result.checkpoint.save(ckpt_dir, force=args.force)
    (out / "metrics.jsonl").write_text(result.log_text())
    final = evaluate(result.model, SceneDataset(spec))
    summary = (f"variant {args.variant}: {tcfg.total_iters} iterations, final loss "
               f"{result.log[-1]['loss_total']:.4f}, train mIoU {final['mIoU']:.4f}")
    (out / "train_summary.txt").write_text(summary + "\n")
    print(summary)
    print(f"checkpoint: {ckpt_dir}")
    return EXIT_OK


def _external_inputs(path: Path):
    """Scenes from a directory of npz files; guidance falls back to the image embeddings."""
    scenes = []
    for name, pair in load_external_dir(path):
        with np.load(path / f"{name}.npz", allow_pickle=False) as z:
            shallow = torch.from_numpy(z["shallow"]) if "shallow" in z.files else pair.image
            deep = torch.from_numpy(z["deep"]) if "deep" in z.files else pair.image
        scenes.append((name, pair, (shallow, deep)))
    return scenes


def _score_predictions(preds: dict[str, np.ndarray], labels_path: Path, n_classes: int) -> dict:
    with np.load(labels_path, allow_pickle=False) as z:
        missing = sorted(set(preds) - set(z.files))
        if missing:
            raise UsageError(f"labels file lacks scenes: {', '.join(missing[:5])}")
        counts = np.zeros((n_classes, 3), dtype=np.int64)
        for name, pred in preds.items():
            gt = z[name]
            if gt.shape != pred.shape:
                raise UsageError(f"{name}: prediction {pred.shape} vs label {gt.shape}")
            counts += confusion_counts(torch.from_numpy(pred), torch.from_numpy(gt), n_classes)
    per_class, miou = iou_from_counts(counts)
    return {"per_class": per_class, "mIoU": miou, "counts": counts}


def cmd_eval(args) -> int:
    out = _out_dir(args)
    if args.predictions:
        if not args.labels:
            raise UsageError("--predictions needs --labels")
        with np.load(args.predictions, allow_pickle=False) as z:
            preds = {k: z[k] for k in z.files}
        n_classes = args.n_classes or 1 + max(int(p.max()) for p in preds.values())
        with np.load(args.labels, allow_pickle=False) as z:
            n_classes = max(n_classes, 1 + max(int(z[k].max()) for k in z.files))
        res = _score_predictions(preds, Path(args.labels), n_classes)
    elif args.checkpoint:
        model = _load_checkpoint(args.checkpoint).build()
        model.eval()
        if args.inputs:
            # external features: predict first, touch labels only afterwards
            preds = {name: model.predict(pair, guide).mask.numpy()
                     for name, pair, guide in _external_inputs(Path(args.inputs))}
            res = _score_predictions(preds, Path(args.labels), model.cfg.n_classes) if args.labels else None
        else:
            spec = _data_spec(args.data)
            _check_model_matches_data(model.cfg, spec)
            ds = SceneDataset(spec)
            res = evaluate(model, ds)
            preds = {f"scene_{i:04d}": model.predict(*ds.inputs(i)).mask.numpy()
                     for i in range(len(ds))} if args.save_predictions else {}
        if args.save_predictions:
            np.savez(out / "predictions.npz", **preds)
            print(f"predictions: {out / 'predictions.npz'}")
        if res is None:
            print(f"predicted {len(preds)} scenes (no labels given)")
            return EXIT_OK
    else:
        raise UsageError("eval needs --checkpoint or --predictions")
    _write_json(out / "eval.json", {"mIoU": res["mIoU"], "per_class_iou": res["per_class"],
                                    "counts_tp_fp_fn": res["counts"]})
    print(f"mIoU {res['mIoU']:.4f}")
    for c, v in enumerate(res["per_class"]):
        print(f"  class {c}: " + ("absent" if v is None else f"{v:.4f}"))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _pipeline(args)
    spec = _data_spec(args.data)
    _check_model_matches_data(cfg, spec)
    fg = load_taxonomy(args.taxonomy, spec.class_names) if args.taxonomy else None
    eval_spec = dataclasses.replace(spec, seed=args.eval_seed)
    tcfg = TrainConfig(total_iters=args.iters, batch_size=args.batch, lr_main=args.lr)
    variants = args.variants.split(",") if args.variants else None
    rows = run_ablation(args.suite, cfg, spec, tcfg, seeds=tuple(args.seeds), fg_classes=fg,
                        eval_data=eval_spec, variants=variants)
    out = _out_dir(args)
    path = out / f"ablation_{args.suite}.csv"
    path.write_text(rows_to_csv(rows))
    lines = [f"{r['variant']:>5}  {r['description']:<32} k={r['k_fg']:<4} mIoU {r['mIoU_mean']:.4f}"
             for r in rows]
    (out / f"ablation_{args.suite}.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"table: {path}")
    return EXIT_OK


def cmd_report_efficiency(args) -> int:
    if args.checkpoint:
        model = _load_checkpoint(args.checkpoint).build()
    else:
        model = build_model(_pipeline(args))
    cfg = model.cfg
    spec = DatasetSpec(n_scenes=1, n_classes=cfg.n_classes, grid=cfg.grid_h, image_size=cfg.grid_h * 4,
                       d_enc=cfg.d_enc)
    if cfg.grid_h != cfg.grid_w:
        raise UsageError("efficiency probe needs a square grid")
    rep = efficiency_report(model, SceneDataset(spec).inputs(0), n_runs=args.runs)
    out = _out_dir(args)
    _write_json(out / "efficiency.json", rep)
    print(f"parameters: {rep['params_enumerated']} (closed form {rep['params_analytic']})")
    print(f"forward: {1000 * rep['wall_median_s']:.2f} ms median over {rep['n_runs']} runs")
    print(f"saliency path: {1000 * rep['saliency_median_s']:.2f} ms "
          f"({100 * rep['saliency_fraction']:.1f}% of forward)")
    for k, v in rep["macs"].items():
        print(f"  MACs {k:<17} {v:,}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    if args.checkpoint:
        model = _load_checkpoint(args.checkpoint).build()
    elif args.untrained:
        model = build_model(_pipeline(args))
    else:
        raise UsageError("visualize needs --checkpoint (or --untrained)")
    model.eval()
    cfg = model.cfg
    spec = _data_spec(args.data)
    _check_model_matches_data(cfg, spec)
    if not 0 <= args.scene < spec.n_scenes:
        raise UsageError(f"scene {args.scene} outside [0, {spec.n_scenes})")
    names = list(spec.class_names)
    if args.class_name not in names:
        raise UsageError(f"unknown class {args.class_name!r}; known: {', '.join(names)}")
    c = names.index(args.class_name)
    ds = SceneDataset(spec)
    pair, guidance = ds.inputs(args.scene)
    h, w = pair.grid
    fig_dir = _out_dir(args) / "figures"
    fig_dir.mkdir(exist_ok=True)
    stem = f"scene{args.scene:04d}_{args.class_name}"
    kinds = ["saliency", "correlation", "partition", "prediction"] if args.kind == "all" else [args.kind]

    sal = part = None
    if {"saliency", "partition"} & set(kinds):
        if not hasattr(model, "cross_attn"):
            raise UsageError(f"variant '{model.variant.disentangle.value}' has no saliency path")
        with torch.no_grad():
            attn = cross_attend(pair, model.cross_attn)
        if args.objective == "constant":
            objective = lambda a: (a * 0.0).sum()  # noqa: E731  (zero gradient everywhere)
        else:
            objective = matching_score_objective(model.itm_head)
        sal = saliency(attn, objective, (h, w)).maps
        part = select_tokens(sal, cfg.k_fg)

    for kind in kinds:
        path = fig_dir / f"{stem}_{kind}.png"
        if kind == "saliency":
            viz.save_heatmap(sal[:, :, c].numpy(), path)
            np.savez(fig_dir / f"{stem}_saliency.npz", saliency=sal.numpy(), class_names=np.array(names))
            print(f"saliency: max {float(sal[:, :, c].max()):.3e} -> {path}")
        elif kind == "correlation":
            viz.save_heatmap(cosine_map(pair)[:, :, c].numpy(), path)
            print(f"correlation -> {path}")
        elif kind == "partition":
            fg = part.grid_mask(h, w)[:, :, c].numpy()
            viz.save_partition(fg, path)
            print(f"partition: {int(fg.sum())} foreground tokens -> {path}")
        else:
            out = model.predict(pair, guidance)
            mask = out.mask.numpy()
            viz.save_mask(mask, path)
            np.savez(fig_dir / f"{stem}_logits.npz", logits=out.logits.numpy())
            gt = ds.labels(args.scene)[1].numpy()  # read only after inference
            acc = float((mask == gt).mean())
            viz.save_panel([("prediction", mask, "mask"), ("generator layout", gt, "mask"),
                            (f"cosine: {args.class_name}", cosine_map(pair)[:, :, c].numpy(), "heat")],
                           fig_dir / f"{stem}_panel.png", title=f"scene {args.scene}")
            print(f"prediction: pixel accuracy {acc:.4f} -> {path}")
    return EXIT_OK


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config file (flat key = value)")
    common.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./salseg_out)")
    common.add_argument("--seed", type=int, help="override the seed")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="salseg", description="Saliency-disentangled segmentation on synthetic embeddings.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--n-scenes", type=int, default=64)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--image-size", type=int, default=48)
    g.add_argument("--grid", type=int, default=12)
    g.add_argument("--d-enc", type=int, default=32)
    g.add_argument("--confusability", type=float, default=0.0)
    g.add_argument("--noise", type=float, default=0.0)
    g.set_defaults(func=cmd_gen_data)

    def data_arg(sp):
        sp.add_argument("--data", help="dataset config file or gen-data directory (default: desk dataset)")

    def model_args(sp):
        sp.add_argument("--variant", default="VIII", help="ablation variant id I..VIII (default VIII, full)")
        sp.add_argument("--aggregation", choices=[a.value for a in Aggregation])
        sp.add_argument("--taxonomy", help="class = fg|bg file (variant III)")

    t = sub.add_parser("train", parents=[common], help="train a model and save a checkpoint")
    data_arg(t)
    model_args(t)
    t.add_argument("--iters", type=int, default=600)
    t.add_argument("--batch", type=int, default=2)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--eval-every", type=int, default=0)
    t.add_argument("--log-every", type=int, default=10)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="mIoU of a checkpoint or of saved predictions")
    data_arg(e)
    e.add_argument("--checkpoint")
    e.add_argument("--inputs", help="directory of npz feature files (image, text[, shallow, deep])")
    e.add_argument("--predictions", help="npz of predicted masks keyed by scene name")
    e.add_argument("--labels", help="npz of label masks keyed by scene name")
    e.add_argument("--n-classes", type=int)
    e.add_argument("--save-predictions", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="run an ablation suite")
    data_arg(a)
    a.add_argument("--suite", choices=["disentanglement", "k_sweep", "aggregation"], required=True)
    a.add_argument("--variants", help="comma-separated variant ids to run (default: all)")
    a.add_argument("--taxonomy")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--eval-seed", type=int, default=100)
    a.add_argument("--iters", type=int, default=300)
    a.add_argument("--batch", type=int, default=2)
    a.add_argument("--lr", type=float, default=1e-3)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report-efficiency", parents=[common], help="parameters, MACs and saliency overhead")
    r.add_argument("--checkpoint")
    r.add_argument("--runs", type=int, default=50)
    r.set_defaults(func=cmd_report_efficiency)

    v = sub.add_parser("visualize", parents=[common], help="saliency / correlation / partition / prediction figures")
    data_arg(v)
    v.add_argument("--checkpoint")
    v.add_argument("--untrained", action="store_true", help="use a freshly initialised model")
    v.add_argument("--scene", type=int, default=0)
    v.add_argument("--class", dest="class_name", required=True)
    v.add_argument("--kind", choices=["saliency", "correlation", "partition", "prediction", "all"], default="all")
    v.add_argument("--objective", choices=["score", "constant"], default="score",
                   help="saliency objective: predicted matching score, or a constant (zero map)")
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"salseg {stage}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SalsegError, FileExistsError, OSError, ValueError, KeyError) as exc:
        print(f"salseg {stage}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
