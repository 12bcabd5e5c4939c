"""Command-line entry point.

Subcommands: gen-data | pretrain | train | eval | infer | rf-report | swa.
Exit codes: 0 success, 1 domain error, 2 usage error. Artifacts land in a
timestamped run directory under --runs-root (or $UMBRA_RUNS, default
./runs); --run-dir pins the directory exactly.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from . import evaluation, receptive, synth, training, viz
from .errors import UmbraError
from .samples import load_manifest, load_split, resize_sample


def _run_dir(args, command: str) -> Path:
    if getattr(args, "run_dir", None):
        path = Path(args.run_dir)
    else:
        root = Path(getattr(args, "runs_root", None)
                    or os.environ.get("UMBRA_RUNS", "runs"))
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = root / f"{stamp}-{command}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_run_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load_config(getattr(args, "config", None))
    overrides = {
        "side": getattr(args, "side", None),
        "mode": getattr(args, "mode", None),
        "train.seed": getattr(args, "seed", None),
        "train.lr": getattr(args, "lr", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train.finetune_iters": getattr(args, "iters", None),
        "train.pretrain_epochs": getattr(args, "epochs", None),
        "eval.threshold": getattr(args, "threshold", None),
        "gen.n_samples": getattr(args, "n", None),
        "gen.seed": getattr(args, "gen_seed", None),
        "gen.confounder_prob": getattr(args, "confounder_prob", None),
    }
    if getattr(args, "swa_points", None):
        overrides["train.swa_points"] = tuple(args.swa_points)
    return cfgmod.apply_overrides(cfg, overrides)


def _load_samples(data_dir: str, split: str, side: int):
    manifest = load_manifest(data_dir, split)
    return [resize_sample(s, side) for s in load_split(manifest)]


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    if args.seed is not None and args.gen_seed is None:
        cfg.gen.seed = args.seed
    out = Path(args.out)
    manifest = synth.generate_dataset(cfg.gen, out, split=args.split)
    cfgmod.write_effective_config(cfg, out)
    print(f"wrote {len(manifest)} samples to {out} (manifest_{args.split}.json)")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args)
    run_dir = _run_dir(args, "pretrain")
    cfgmod.write_effective_config(cfg, run_dir)
    samples = _load_samples(args.data, "train", cfg.side)
    ckpt, losses = training.pretrain_restoration(samples, cfg.train, cfg.arch())
    path = training.save_checkpoint(ckpt, run_dir / "restoration.pt")
    (run_dir / "pretrain_losses.json").write_text(json.dumps(losses))
    print(f"pretrained restoration network: {path}")
    print(f"final loss {losses[-1]:.6f} over {len(losses)} steps")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    run_dir = _run_dir(args, "train")
    cfgmod.write_effective_config(cfg, run_dir)
    samples = _load_samples(args.data, "train", cfg.side)
    pre = training.load_checkpoint(args.pretrain) if args.pretrain else None
    ckpts, losses, _ = training.finetune_r2d(samples, pre, cfg.train, cfg.arch(),
                                             loss_weights=cfg.loss)
    paths = [training.save_checkpoint(c, run_dir / f"ckpt_{c.iteration:06d}.pt")
             for c in ckpts]
    (run_dir / "train_losses.json").write_text(json.dumps(losses))
    for p in paths:
        print(f"checkpoint: {p}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    run_dir = _run_dir(args, "eval")
    cfgmod.write_effective_config(cfg, run_dir)
    # samples stay at native size; the predictor maps to cfg.side and back
    samples = load_split(load_manifest(args.data, args.split))
    ckpt = training.load_checkpoint(args.ckpt)
    if args.residual_baseline:
        report = evaluation.evaluate_residual_baseline(
            ckpt, samples, residual_threshold=cfg.eval.residual_threshold,
            threshold=cfg.eval.threshold, side=cfg.side)
    else:
        report = evaluation.evaluate_model(ckpt, samples,
                                           threshold=cfg.eval.threshold, side=cfg.side)
    out = evaluation.write_report(report, run_dir / "ber_report.json")
    print(report.table())
    print(f"report: {out}")
    if args.emit_predictions:
        model = training.build_model(ckpt)
        predict = evaluation.model_predictor(model, cfg.side)
        pred_dir = run_dir / "predictions"
        pred_dir.mkdir(exist_ok=True)
        for s in samples:
            prob = predict(s)
            viz.save_prediction_png(pred_dir / f"{s.id}_pred.png", prob)
            viz.save_overlay_png(pred_dir / f"{s.id}_overlay.png", s.image,
                                 (prob >= cfg.eval.threshold).astype(np.uint8))
    return 0


def cmd_infer(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(args.out) if args.out else _run_dir(args, "infer")
    out_dir.mkdir(parents=True, exist_ok=True)
    from .samples import ShadowSample, _read_rgb

    image = _read_rgb(Path(args.image))
    sample = ShadowSample(image=image, mask=np.zeros(image.shape[:2], dtype=np.uint8),
                          id=Path(args.image).stem)
    ckpt = training.load_checkpoint(args.ckpt)
    model = training.build_model(ckpt)
    prob = evaluation.model_predictor(model, cfg.side)(sample)
    stem = Path(args.image).stem
    viz.save_prediction_png(out_dir / f"{stem}_mask.png", prob)
    viz.save_overlay_png(out_dir / f"{stem}_overlay.png", image,
                         (prob >= cfg.eval.threshold).astype(np.uint8))
    print(f"wrote {out_dir / (stem + '_mask.png')} and {out_dir / (stem + '_overlay.png')}")
    return 0


def cmd_rf_report(args) -> int:
    cfg = _load_run_config(args)
    report = receptive.rf_report(cfg.side, fcd_depth=cfg.fcd.depth,
                                 fcd_growth=cfg.fcd.growth_px,
                                 run_empirical=not args.no_empirical)
    print(receptive.render_report(report))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(receptive.report_to_json(report))
        print(f"report: {args.out}")
    return 0


def cmd_swa(args) -> int:
    ckpts = [training.load_checkpoint(p) for p in args.ckpts]
    averaged = training.swa_average(ckpts)
    if args.data:
        cfg = _load_run_config(args)
        model = training.build_model(averaged)
        samples = _load_samples(args.data, "train", cfg.side)
        training.recompute_norm_stats(model, samples, batch_size=cfg.train.batch_size)
        averaged.params = {k: v.detach().clone() for k, v in model.state_dict().items()}
    path = training.save_checkpoint(averaged, args.out)
    print(f"averaged {len(ckpts)} checkpoints -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="umbra",
                                     description="shadow detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run_dir=True):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--side", type=int, help="image side (multiple of 32)")
        p.add_argument("--seed", type=int, help="training seed")
        if run_dir:
            p.add_argument("--run-dir", help="exact run directory")
            p.add_argument("--runs-root", help="root for timestamped run dirs")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset split")
    common(p, run_dir=False)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--split", default="train", choices=("train", "test"))
    p.add_argument("--gen-seed", type=int, dest="gen_seed", help="generator seed")
    p.add_argument("--confounder-prob", type=float, dest="confounder_prob")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain the restoration network")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--epochs", type=int, help="pretraining epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune a detection model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", help="bb_only | bb_ccd | bb_fcd | bb_ccd_fcd | "
                                  "r2d_no_cfl | r2d_full (alias fcsd_only)")
    p.add_argument("--pretrain", help="restoration checkpoint (r2d modes)")
    p.add_argument("--iters", type=int, help="fine-tuning iterations")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--swa-points", type=int, nargs="+", dest="swa_points")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (BER report)")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--residual-baseline", action="store_true",
                   help="evaluate the restoration-residual baseline instead")
    p.add_argument("--emit-predictions", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict a mask for one image")
    common(p, run_dir=False)
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("rf-report", help="receptive-field analysis table")
    common(p, run_dir=False)
    p.add_argument("--out", help="JSON output path")
    p.add_argument("--no-empirical", action="store_true")
    p.set_defaults(func=cmd_rf_report)

    p = sub.add_parser("swa", help="average checkpoints")
    common(p)
    p.add_argument("--ckpts", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="training data for normalization-stat recompute")
    p.set_defaults(func=cmd_swa)

    return parser


def main(argv=None) -> int:
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UmbraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
