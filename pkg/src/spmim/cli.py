"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 numerical abort (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import figures
from .config import RunConfig, config_reference, load_config
from .data import (
    augment,
    ImageRecord,
    holdout_split,
    load_dataset,
    load_image,
    quality_check,
    read_manifest,
    save_image_png,
)
from .errors import ConfigError, DataError, NumericsError, SpmimError
from .masking import build_mask_pyramid, sample_mask, stack_pyramids
from .metrics import (
    METRIC_NAMES,
    PredictionSet,
    cross_validate,
    evaluate_predictions,
    gradcam,
    heatmap_overlay,
    write_metrics,
)
from .tensor import Tensor, no_grad
from .training import (
    build_classifier,
    build_pretrain_model,
    derive_seed,
    encoder_config_dict,
    finetune,
    load_checkpoint,
    make_classifier_checkpoint,
    make_pretrain_checkpoint,
    predict_probabilities,
    pretrain,
    restore_classifier,
    restore_optimizer,
    restore_pretrain_model,
    save_checkpoint,
)

_AUGMENT_TAG = 7


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="spmim", description=__doc__)
    parser.add_argument("--config-reference", action="store_true",
                        help="print the documented default config and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p, seed=True, checkpoint=False):
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--out", help="override the [output] dir")
        if seed:
            p.add_argument("--seed", type=int, default=0)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    common(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the existing checkpoint")

    p = sub.add_parser("finetune", help="supervised training of a classifier")
    common(p)
    p.add_argument("--pretrained", help="pretraining checkpoint to start from")
    p.add_argument("--resume", action="store_true",
                   help="continue from the existing checkpoint "
                        "(weights and epoch; optimizer restarts)")

    p = sub.add_parser("evaluate", help="score a classifier checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--manifest", help="override the [data] manifest")
    p.add_argument("--kfold", type=int,
                   help="run stratified k-fold cross-validation training instead")
    p.add_argument("--pretrained",
                   help="pretraining checkpoint for the k-fold arms")

    p = sub.add_parser("reconstruct",
                       help="write original/masked/reconstruction panels")
    common(p, checkpoint=True)
    p.add_argument("--manifest", help="override the [data] manifest")
    p.add_argument("--count", type=int, default=4, help="images to render")

    p = sub.add_parser("gradcam", help="class-evidence heatmap for one image")
    common(p, checkpoint=True)
    p.add_argument("--image", required=True)
    p.add_argument("--target-class", type=int, required=True)
    p.add_argument("--scale", type=int, help="encoder tap (default from config)")

    p = sub.add_parser("qc", help="quality-control report for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="run config (for thresholds)")
    p.add_argument("--out", help="write qc.tsv and score histograms here")

    p = sub.add_parser("bench",
                       help="time dense vs sparse encoder forward passes")
    common(p)
    p.add_argument("--ratios", default="0.0,0.3,0.6,0.9")
    return parser


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "out", None):
        cfg = RunConfig(**{**cfg.__dict__, "output_dir": args.out})
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _augment_hook(cfg: RunConfig, seed: int):
    if not cfg.data.augment:
        return None
    policy = cfg.data.policy

    def hook(epoch: int, index: int, image: np.ndarray) -> np.ndarray:
        record = ImageRecord(id=str(index), pixels=image)
        out = augment(record, policy,
                      seed=derive_seed(seed, _AUGMENT_TAG, epoch, index))
        return out.pixels

    return hook


def _config_snapshot(cfg: RunConfig) -> dict:
    return {
        "encoder": encoder_config_dict(cfg.encoder),
        "decoder": {"channels": list(cfg.decoder.channels)},
        "masking": {"ratio": cfg.mask_ratio},
        "image_size": cfg.image_size,
        "finetune": {
            "epochs": cfg.finetune.epochs,
            "batch_size": cfg.finetune.batch_size,
            "num_classes": cfg.finetune.num_classes,
            "head_dropout": cfg.finetune.head_dropout,
            "freeze_encoder": cfg.finetune.freeze_encoder,
            "lr_schedule": cfg.finetune.lr_schedule,
        },
    }


def _append_report(records, out: Path, stem: str) -> None:
    report = out / f"{stem}.tsv"
    timing = out / f"{stem}_timing.tsv"
    new_report = not report.exists()
    with open(report, "a", encoding="utf-8") as fh:
        if new_report:
            fh.write("epoch\tmean_loss\n")
        for r in records:
            fh.write(f"{r.epoch}\t{r.mean_loss:.17g}\n")
    new_timing = not timing.exists()
    with open(timing, "a", encoding="utf-8") as fh:
        if new_timing:
            fh.write("epoch\twall_ms\n")
        for r in records:
            fh.write(f"{r.epoch}\t{r.wall_ms:.3f}\n")


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(cfg)
    ckpt_path = out / "pretrain.spmim"
    images, _, _ = load_dataset(cfg.data.manifest, image_size=cfg.image_size)
    snapshot = _config_snapshot(cfg)
    if ckpt_path.exists():
        if not args.resume:
            raise ConfigError(
                f"{ckpt_path} already exists; pass --resume to continue"
            )
        ckpt = load_checkpoint(ckpt_path)
        if ckpt.config.get("encoder") != snapshot["encoder"]:
            raise ConfigError("checkpoint encoder config does not match run config")
        model = restore_pretrain_model(ckpt)
        optimizer = restore_optimizer(ckpt, model, cfg.optimizer)
        start_epoch = ckpt.epoch
        seed = ckpt.seed
    else:
        model = build_pretrain_model(cfg.encoder, cfg.decoder, args.seed)
        optimizer = None
        start_epoch = 0
        seed = args.seed
    records, optimizer = pretrain(
        model, images, cfg.pretrain, cfg.optimizer, seed,
        start_epoch=start_epoch, optimizer=optimizer,
        augment_fn=_augment_hook(cfg, seed),
    )
    ckpt = make_pretrain_checkpoint(model, snapshot, seed=seed,
                                    epoch=cfg.pretrain.epochs, optimizer=optimizer)
    save_checkpoint(ckpt_path, ckpt)
    _append_report(records, out, "report")
    if records:
        figures.save_loss_curve(records, out / "loss_curve.png")
    print(f"pretrained {cfg.pretrain.epochs} epochs on {len(images)} images "
          f"({model.parameter_count()} parameters); checkpoint at {ckpt_path}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(cfg)
    ckpt_path = out / "finetune.spmim"
    images, labels, _ = load_dataset(cfg.data.manifest, image_size=cfg.image_size)
    if labels is None:
        raise DataError("fine-tuning requires a fully labeled manifest")
    snapshot = _config_snapshot(cfg)
    start_epoch = 0
    if ckpt_path.exists():
        if not args.resume:
            raise ConfigError(
                f"{ckpt_path} already exists; pass --resume to continue"
            )
        ckpt = load_checkpoint(ckpt_path)
        if ckpt.config.get("encoder") != snapshot["encoder"]:
            raise ConfigError("checkpoint encoder config does not match run config")
        model = restore_classifier(ckpt)
        start_epoch = ckpt.epoch
        seed = ckpt.seed
    else:
        pretrained = load_checkpoint(args.pretrained) if args.pretrained else None
        model = build_classifier(cfg.encoder, cfg.finetune, args.seed,
                                 pretrained=pretrained)
        seed = args.seed
    train_idx, val_idx = holdout_split(len(images), cfg.data.holdout_ratio,
                                       seed=derive_seed(seed, 50))
    records, _ = finetune(
        model, images[train_idx], labels[train_idx], cfg.finetune, cfg.optimizer,
        seed, start_epoch=start_epoch, augment_fn=_augment_hook(cfg, seed),
    )
    ckpt = make_classifier_checkpoint(model, snapshot, seed=seed,
                                      epoch=cfg.finetune.epochs)
    save_checkpoint(ckpt_path, ckpt)
    _append_report(records, out, "report")
    if records:
        figures.save_loss_curve(records, out / "loss_curve.png")
    probs = predict_probabilities(model, images[val_idx])
    preds = PredictionSet(probabilities=probs, labels=labels[val_idx])
    scores = evaluate_predictions(preds)
    write_metrics(out / "val_metrics.tsv", [scores])
    figures.save_metrics_bar(scores, None, out / "val_metrics.png")
    summary = ", ".join(f"{m}={scores[m]:.4f}" for m in METRIC_NAMES)
    print(f"fine-tuned {cfg.finetune.epochs} epochs; validation {summary}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(cfg)
    manifest = args.manifest or cfg.data.manifest
    images, labels, _ = load_dataset(manifest, image_size=cfg.image_size)
    if labels is None:
        raise DataError("evaluation requires a fully labeled manifest")
    if args.kfold:
        pretrained = load_checkpoint(args.pretrained) if args.pretrained else None

        def train_fold(train_idx, test_idx, fold_seed):
            model = build_classifier(cfg.encoder, cfg.finetune, fold_seed,
                                     pretrained=pretrained)
            finetune(model, images[train_idx], labels[train_idx], cfg.finetune,
                     cfg.optimizer, fold_seed,
                     augment_fn=_augment_hook(cfg, fold_seed))
            probs = predict_probabilities(model, images[test_idx])
            return PredictionSet(probabilities=probs, labels=labels[test_idx])

        result = cross_validate(labels, train_fold, k=args.kfold, seed=args.seed)
        rows = result.folds + [result.mean, result.std]
        tags = [f"fold{i + 1}" for i in range(len(result.folds))] + ["mean", "std"]
        write_metrics(out / "metrics.tsv", rows, extra_columns={"split": tags})
        figures.save_metrics_bar(result.mean, result.std, out / "metrics.png")
        for tag, row in zip(tags, rows):
            print(tag + "\t" + "\t".join(f"{row[m]:.4f}" for m in METRIC_NAMES))
    else:
        model = restore_classifier(load_checkpoint(args.checkpoint))
        probs = predict_probabilities(model, images)
        preds = PredictionSet(probabilities=probs, labels=labels)
        scores = evaluate_predictions(preds)
        write_metrics(out / "metrics.tsv", [scores])
        figures.save_metrics_bar(scores, None, out / "metrics.png")
        print("\t".join(METRIC_NAMES))
        print("\t".join(f"{scores[m]:.4f}" for m in METRIC_NAMES))
    return 0


def _triptych(original: np.ndarray, masked: np.ndarray,
              recon: np.ndarray) -> np.ndarray:
    gap = np.ones((3, original.shape[1], 2))
    return np.concatenate([original, gap, masked, gap, recon], axis=2)


def cmd_reconstruct(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(cfg)
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_pretrain_model(ckpt)
    manifest = args.manifest or cfg.data.manifest
    images, _, ids = load_dataset(manifest, image_size=cfg.image_size)
    depth = model.encoder.depth
    rows = cfg.image_size // 2 ** depth
    count = min(args.count, len(images))
    for i in range(count):
        grid = sample_mask(rows, rows, cfg.mask_ratio,
                           seed=derive_seed(args.seed, 60, i))
        pyramid = build_mask_pyramid(grid, cfg.image_size, cfg.image_size,
                                     depth=depth)
        stack = stack_pyramids([pyramid])
        with no_grad():
            recon = model.reconstruct(Tensor(images[i : i + 1]), stack,
                                      training=False)
        visible = pyramid.input_mask().astype(np.float64)[None, None]
        masked_view = (images[i : i + 1] * visible)[0]
        panel = _triptych(images[i], masked_view,
                          np.clip(recon.data[0], 0.0, 1.0))
        save_image_png(out / f"{ids[i]}_reconstruction.png", panel)
    print(f"wrote {count} reconstruction panels to {out}")
    return 0


def cmd_gradcam(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(cfg)
    model = restore_classifier(load_checkpoint(args.checkpoint))
    record = load_image(args.image)
    from .data import bilinear_resize

    pixels = bilinear_resize(record.pixels, cfg.image_size, cfg.image_size)
    scale = args.scale if args.scale is not None else min(
        cfg.gradcam_scale, model.encoder.depth
    )
    heat = gradcam(model, pixels, target_class=args.target_class, scale=scale)
    gray_path = out / f"{record.id}_cam.png"
    overlay_path = out / f"{record.id}_overlay.png"
    save_image_png(gray_path, heat.values)
    save_image_png(overlay_path, heatmap_overlay(heat, pixels))
    print(f"wrote {gray_path} and {overlay_path}")
    return 0


def cmd_qc(args) -> int:
    thresholds = None
    if args.config:
        thresholds = load_config(args.config).data.quality
    entries = read_manifest(args.manifest)
    header = ("id\tpath\tblur_score\tcontrast_score\tillumination_score"
              "\tartifact_score\tpass\tfailed_checks")
    lines = [header]
    reports = []
    for path, _ in entries:
        record = load_image(path)
        report = (quality_check(record, thresholds) if thresholds
                  else quality_check(record))
        reports.append(report)
        lines.append(
            f"{record.id}\t{path}\t{report.blur_score:.6g}"
            f"\t{report.contrast_score:.6g}\t{report.illumination_score:.6g}"
            f"\t{report.artifact_score:.6g}\t{str(report.passed).lower()}"
            f"\t{','.join(report.failed_checks)}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "qc.tsv").write_text(text, encoding="utf-8")
        figures.save_qc_histogram(reports, out / "qc_scores.png")
        passed = sum(r.passed for r in reports)
        print(f"{passed}/{len(reports)} records passed; report in {out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(cfg)
    try:
        ratios = [float(r) for r in args.ratios.split(",")]
    except ValueError as exc:
        raise UsageError(f"--ratios must be comma-separated floats: {exc}")
    model = build_pretrain_model(cfg.encoder, cfg.decoder, args.seed)
    encoder = model.encoder
    size = cfg.image_size
    rows = size // 2 ** encoder.depth
    image = np.random.default_rng(args.seed).random((1, 3, size, size))

    def median_ms(fn, repeats=5):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1e3)
        return float(np.median(times))

    results = []
    for ratio in ratios:
        grid = sample_mask(rows, rows, ratio, seed=derive_seed(args.seed, 70))
        pyramid = build_mask_pyramid(grid, size, size, depth=encoder.depth)
        dense_ms = median_ms(lambda: encoder.forward_arrays(image))
        sparse_ms = median_ms(lambda: encoder.forward_arrays(image, pyramid))
        compact_ms = median_ms(
            lambda: encoder.forward_arrays(image, pyramid, compact=True)
        )
        results.append({
            "ratio": ratio, "dense_ms": dense_ms, "sparse_ms": sparse_ms,
            "compact_ms": compact_ms,
            "speedup": dense_ms / compact_ms if compact_ms > 0 else float("inf"),
        })
    header = f"{'ratio':>6} {'dense_ms':>10} {'sparse_ms':>10} {'compact_ms':>11} {'speedup':>8}"
    print(header)
    for r in results:
        print(f"{r['ratio']:>6.2f} {r['dense_ms']:>10.2f} {r['sparse_ms']:>10.2f} "
              f"{r['compact_ms']:>11.2f} {r['speedup']:>8.2f}")
    with open(out / "bench.tsv", "w", encoding="utf-8") as fh:
        fh.write("ratio\tdense_ms\tsparse_ms\tcompact_ms\tspeedup\n")
        for r in results:
            fh.write(f"{r['ratio']}\t{r['dense_ms']:.3f}\t{r['sparse_ms']:.3f}"
                     f"\t{r['compact_ms']:.3f}\t{r['speedup']:.3f}\n")
    figures.save_bench_chart(results, out / "bench.png")
    return 0


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "reconstruct": cmd_reconstruct,
    "gradcam": cmd_gradcam,
    "qc": cmd_qc,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config_reference:
            print(config_reference())
            return 0
        if not args.command:
            raise UsageError("a subcommand is required")
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except NumericsError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except SpmimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
