"""Command-line entry point: ``covidcxr <subcommand> ...``.

Exit codes: 0 ok, 1 pipeline error, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .corpus import CorpusError, class_weights, load_manifest, make_folds, save_folds
from .lungseg import PreprocessMode

log = logging.getLogger("covidcxr")

EXIT_OK, EXIT_PIPELINE, EXIT_CONFIG = 0, 1, 2


def _config(args) -> pl.PipelineConfig:
    """Config file (if any) with command-line flags layered on top."""
    if getattr(args, "config", None):
        cfg = pl.load_config(args.config)
    else:
        if not getattr(args, "manifest", None):
            raise pl.ConfigError("need --config or --manifest")
        cfg = pl.config_from_dict({"manifest": args.manifest})
    for flag, key in (("manifest", "manifest"), ("seed", "seed"), ("folds", "k"),
                      ("workers", "workers"), ("out", "out"), ("segmenter", "segmenter"),
                      ("unet_checkpoint", "unet_checkpoint")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "mode", None):
        cfg.mode = PreprocessMode(args.mode)
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    return cfg


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise pl.ConfigError(f"{what} not found: {p}")
    return p


def cmd_make_phantoms(args) -> int:
    from .phantoms import make_corpus
    recs = make_corpus(args.out, n_per_class=args.per_class, seed=args.seed or 0)
    print(f"wrote {len(recs)} phantoms to {args.out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    _require_file(args.manifest, "manifest")
    records = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    folds = make_folds(records, args.folds or 5, args.seed or 0, not args.no_patient_disjoint)
    save_folds(folds, out / "folds.json")
    weights = class_weights(records)
    (out / "class_weights.json").write_text(
        json.dumps({lab.name: w for lab, w in weights.items()}, indent=1) + "\n")
    print(f"{len(records)} records, {len(folds)} folds -> {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    pl.validate(cfg)
    records = load_manifest(cfg.manifest)
    windows = pl.load_window_sidecar(cfg.window_sidecar) if cfg.window_sidecar else None
    skipped = pl.preprocess_stage(records, cfg.out, cfg.mode, pl.make_segmenter(cfg),
                                  cfg.network.input_size, cfg.workers, windows)
    print(f"processed {len(records) - len(skipped)} records, skipped {len(skipped)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    pl.validate(cfg)
    _require_file(args.folds_file, "folds file")
    records, split = pl.load_fold_records(cfg.manifest, args.folds_file, args.fold)
    _, history = pl.train_fold(cfg, records, split, args.processed, cfg.out)
    last = history[-1] if history else None
    print(f"fold {args.fold}: {len(history)} epochs"
          + (f", val loss {last.val_loss:.4f}" if last else ""))
    return EXIT_OK


def _load_images(args, records):
    """Processed images if a directory is given, otherwise preprocess on the fly."""
    if args.processed:
        return pl.load_processed(records, args.processed)
    cfg = _config(args)
    seg = pl.make_segmenter(cfg)
    kept, images = [], []
    for r in records:
        try:
            images.append(pl.preprocess_record(r, cfg.mode, seg, cfg.network.input_size))
            kept.append(r)
        except pl.EmptyMask as exc:
            log.warning("skipping %s: %s", r.record_id, exc)
    return kept, images


def cmd_eval(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.manifest, "manifest")
    net, _ = pl.load_checkpoint(args.checkpoint)
    records = load_manifest(args.manifest)
    if args.folds_file:
        _, split = pl.load_fold_records(args.manifest, args.folds_file, args.fold)
        records = [r for r in records if r.record_id in split.test_ids]
    recs, images = _load_images(args, records)
    rows = pl.predict_records(net, recs, images, args.fold)
    pl.write_predictions(rows, args.out)
    print(f"wrote {len(rows)} predictions to {args.out}")
    return EXIT_OK


def cmd_gradcam(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.manifest, "manifest")
    net, _ = pl.load_checkpoint(args.checkpoint)
    recs, images = _load_images(args, load_manifest(args.manifest))
    pl.gradcam_stage(net, recs, images, args.out)
    print(f"wrote {len(recs)} overlays to {args.out}")
    return EXIT_OK


def cmd_embed(args) -> int:
    from .plots import plot_embedding
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.manifest, "manifest")
    net, _ = pl.load_checkpoint(args.checkpoint)
    recs, images = _load_images(args, load_manifest(args.manifest))
    points = pl.embed_stage(net, recs, images, args.out, args.perplexity, args.iterations, args.seed or 0)
    if args.plot:
        plot_embedding(points, Path(args.plot).with_suffix("").as_posix() + "_label.png", by="label")
        plot_embedding(points, Path(args.plot).with_suffix("").as_posix() + "_source.png", by="source")
    print(f"wrote {len(points)} points to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    _require_file(args.manifest, "manifest")
    experiments = {}
    for item in args.preds:
        name, _, path = item.rpartition("=")
        path = _require_file(path, "predictions")
        experiments[name or path.stem] = pl.read_predictions(path)
    summary = pl.report_stage(experiments, load_manifest(args.manifest), args.out)
    for exp, entry in summary.items():
        agg = entry.get("aggregate", entry["pooled"])
        print(f"{exp}: acc {agg['acc']:.4f} bacc {agg['bacc']:.4f} gmr {agg['gmr']:.4f}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    out = pl.run(cfg)
    print(f"artifacts in {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covidcxr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="pipeline config JSON")
        p.add_argument("--manifest")
        p.add_argument("--out", required=out_required)
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=[m.value for m in PreprocessMode])
        p.add_argument("--folds", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--segmenter", choices=["heuristic", "unet"])
        p.add_argument("--unet-checkpoint", dest="unet_checkpoint")

    p = sub.add_parser("make-phantoms", help="generate a synthetic phantom corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_phantoms)

    p = sub.add_parser("ingest", help="validate a manifest, write folds and class weights")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-patient-disjoint", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("preprocess", help="write processed network-size PNGs")
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one fold")
    common(p)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--folds-file", required=True)
    p.add_argument("--processed", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "predict a fold's test records to CSV"),
        ("gradcam", cmd_gradcam, "write Grad-CAM overlays"),
        ("embed", cmd_embed, "t-SNE of penultimate features to CSV"),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--processed", help="directory of processed PNGs")
        if name == "eval":
            p.add_argument("--fold", type=int, default=0)
            p.add_argument("--folds-file")
        if name == "embed":
            p.add_argument("--perplexity", type=float, default=30.0)
            p.add_argument("--iterations", type=int, default=1000)
            p.add_argument("--plot", help="prefix for scatter plot PNGs")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="metrics, ROC, confusion and subgroup tables")
    p.add_argument("--preds", action="append", required=True,
                   help="predictions CSV, optionally NAME=PATH; repeat per experiment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="end-to-end pipeline from one config")
    common(p, out_required=False)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, OSError, ValueError, RuntimeError) as exc:
        print(f"pipeline error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    raise SystemExit(main())
