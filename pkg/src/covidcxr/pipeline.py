"""Pipeline stages and configuration shared by the CLI subcommands."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .corpus import (
    FoldSplit, ImageRecord, Label, class_weights, load_folds, load_manifest, make_folds,
    save_folds, split_validation,
)
from .evalkit import (
    FACTORS, MetricsReport, aggregate_folds, average_roc, confusion, evaluate, roc_auc,
    subgroup_table, write_confusion_csv, write_roc_csv,
)
from .explain import (
    grad_cam, penultimate_features, project_2d, render_overlay, write_overlay, write_points_csv,
)
from .imgproc import (
    IMAGENET_ZSCORE, apply_window, load_window_sidecar, read_png16, to_input_tensor,
    to_network_size, write_png16,
)
from .lungseg import EmptyMask, HeuristicSegmenter, LearnedUNet, PreprocessMode, preprocess
from .model import (
    CovidNet, NetworkConfig, TrainConfig, build_network, load_checkpoint, predict_proba,
    save_checkpoint, train, write_history_csv,
)

log = logging.getLogger(__name__)

PROB_COLUMNS = [f"p_{lab.name}" for lab in Label]


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    manifest: str
    out: str = "runs/default"
    mode: PreprocessMode = PreprocessMode.Segment
    k: int = 5
    seed: int = 0
    segmenter: str = "heuristic"
    unet_checkpoint: str | None = None
    lungs_bright: bool = True
    window_sidecar: str | None = None
    patient_disjoint: bool = True
    weighted_loss: bool = True
    val_fraction: float = 0.10
    workers: int = 1
    tsne_perplexity: float = 30.0
    tsne_iterations: int = 1000
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        t = d["train"]
        t["augment_classes"] = sorted(lab.name for lab in self.train.augment_classes)
        if self.train.class_weights is not None:
            t["class_weights"] = {lab.name: w for lab, w in self.train.class_weights.items()}
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


def _labels(names) -> frozenset:
    return frozenset(Label[n] if isinstance(n, str) else Label(n) for n in names)


def config_from_dict(raw: dict, base_dir: Path | None = None) -> PipelineConfig:
    raw = dict(raw)
    if "manifest" not in raw:
        raise ConfigError("config needs a 'manifest' entry")
    net_raw = raw.pop("network", {}) or {}
    train_raw = dict(raw.pop("train", {}) or {})
    if "augment_classes" in train_raw:
        train_raw["augment_classes"] = _labels(train_raw["augment_classes"])
    if train_raw.get("class_weights"):
        train_raw["class_weights"] = {Label[k]: v for k, v in train_raw["class_weights"].items()}
    if "zscore" in train_raw:
        from .imgproc import ZScoreParams
        z = train_raw["zscore"]
        train_raw["zscore"] = ZScoreParams(tuple(z["mean"]), tuple(z["std"]))
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    try:
        cfg = PipelineConfig(
            **raw,
            network=NetworkConfig(**net_raw),
            train=TrainConfig(**train_raw),
        )
        cfg.mode = PreprocessMode(cfg.mode)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    if base_dir is not None:
        for key in ("manifest", "unet_checkpoint", "window_sidecar"):
            value = getattr(cfg, key)
            if value and not Path(value).is_absolute():
                setattr(cfg, key, str(base_dir / value))
    return cfg


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def validate(cfg: PipelineConfig) -> None:
    if not Path(cfg.manifest).is_file():
        raise ConfigError(f"manifest not found: {cfg.manifest}")
    if cfg.segmenter not in ("heuristic", "unet"):
        raise ConfigError(f"segmenter must be 'heuristic' or 'unet', got {cfg.segmenter!r}")
    if cfg.segmenter == "unet" and not (cfg.unet_checkpoint and Path(cfg.unet_checkpoint).is_file()):
        raise ConfigError(f"unet checkpoint not found: {cfg.unet_checkpoint}")
    if cfg.window_sidecar and not Path(cfg.window_sidecar).is_file():
        raise ConfigError(f"window sidecar not found: {cfg.window_sidecar}")
    if cfg.k < 2:
        raise ConfigError("k must be >= 2")
    if cfg.network.input_size != 224 and cfg.network.input_size < 8:
        raise ConfigError("network input_size too small")


def make_segmenter(cfg: PipelineConfig):
    if cfg.segmenter == "unet":
        return LearnedUNet.load(cfg.unet_checkpoint)
    return HeuristicSegmenter(lungs_bright=cfg.lungs_bright)


# --- stages ---------------------------------------------------------------


def load_raw_image(record: ImageRecord, windows: dict | None = None) -> np.ndarray:
    if windows and record.record_id in windows:
        import cv2
        raw = cv2.imread(record.image_path, cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise FileNotFoundError(record.image_path)
        center, width = windows[record.record_id]
        return apply_window(raw, center, width)
    return read_png16(record.image_path)


def preprocess_record(record: ImageRecord, mode: PreprocessMode, segmenter, size: int,
                      windows: dict | None = None) -> np.ndarray:
    img = load_raw_image(record, windows)
    return to_network_size(preprocess(img, mode, segmenter), size)


def preprocess_stage(
    records: Sequence[ImageRecord],
    out_dir: str | Path,
    mode: PreprocessMode,
    segmenter,
    size: int = 224,
    workers: int = 1,
    windows: dict | None = None,
) -> list[dict]:
    """Write ``<record_id>.png`` network-size images; returns the skipped-record log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(rec: ImageRecord):
        try:
            img = preprocess_record(rec, mode, segmenter, size, windows)
        except EmptyMask as exc:
            log.warning("skipping %s: %s", rec.record_id, exc)
            return {"record_id": rec.record_id, "reason": f"EmptyMask: {exc}"}
        write_png16(out_dir / f"{rec.record_id}.png", img)
        return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, records))
    else:
        results = [work(r) for r in records]
    skipped = [r for r in results if r is not None]
    (out_dir / "skipped.json").write_text(json.dumps(skipped, indent=1) + "\n")
    return skipped


def load_processed(records: Sequence[ImageRecord], processed_dir: str | Path):
    """Records that have a processed image, with the images, in input order."""
    processed_dir = Path(processed_dir)
    kept, images = [], []
    for r in records:
        p = processed_dir / f"{r.record_id}.png"
        if p.is_file():
            kept.append(r)
            images.append(read_png16(p))
    return kept, images


def fold_train_config(cfg: PipelineConfig, train_records: Sequence[ImageRecord], fold: int) -> TrainConfig:
    weights = class_weights(train_records) if cfg.weighted_loss else None
    return dataclasses.replace(cfg.train, seed=cfg.seed + fold, class_weights=weights)


def train_fold(
    cfg: PipelineConfig,
    records: Sequence[ImageRecord],
    split: FoldSplit,
    processed_dir: str | Path,
    out_dir: str | Path,
) -> tuple[CovidNet, list]:
    out_dir = Path(out_dir)
    pool = [r for r in records if r.record_id in split.train_ids]
    fit_recs, val_recs = split_validation(pool, cfg.val_fraction, seed=cfg.seed + split.fold_index)
    fit_recs, fit_imgs = load_processed(fit_recs, processed_dir)
    val_recs, val_imgs = load_processed(val_recs, processed_dir)
    tcfg = fold_train_config(cfg, fit_recs, split.fold_index)
    net = build_network(cfg.network, seed=cfg.seed)
    net, history = train(
        net,
        list(zip(fit_imgs, [r.label for r in fit_recs])),
        list(zip(val_imgs, [r.label for r in val_recs])),
        tcfg,
    )
    k = split.fold_index
    save_checkpoint(net, out_dir / "checkpoints" / f"fold_{k}.pt", epoch=tcfg.epochs, seed=tcfg.seed)
    write_history_csv(history, out_dir / f"history_{k}.csv")
    return net, history


def predict_records(net: CovidNet, records, images, fold: int, zscore=IMAGENET_ZSCORE) -> list[dict]:
    probs = predict_proba(net, images, zscore)
    rows = []
    for rec, p in zip(records, probs):
        row = {"record_id": rec.record_id, "fold": fold, "true": rec.label.name,
               "pred": Label(int(np.argmax(p))).name}
        row.update({c: repr(float(v)) for c, v in zip(PROB_COLUMNS, p)})
        rows.append(row)
    return rows


def write_predictions(rows: Sequence[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["record_id", "fold", "true", "pred"] + PROB_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def read_predictions(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _arrays(rows):
    truth = np.array([int(Label[r["true"]]) for r in rows])
    preds = np.array([int(Label[r["pred"]]) for r in rows])
    scores = np.array([[float(r[c]) for c in PROB_COLUMNS] for r in rows])
    return truth, preds, scores


def report_stage(
    preds_by_experiment: dict[str, list[dict]],
    records: Sequence[ImageRecord],
    out_dir: str | Path,
) -> dict:
    """metrics.json, confusion/ROC/subgroup CSVs and plots for one or more experiments."""
    from .plots import plot_average_roc, plot_confusion, plot_roc

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {r.record_id: r for r in records}
    summary: dict = {}
    avg_curves = {}
    multi = len(preds_by_experiment) > 1
    for exp, rows in preds_by_experiment.items():
        prefix = f"{exp}_" if multi else ""
        truth, preds, scores = _arrays(rows)
        folds = sorted({int(r["fold"]) for r in rows})
        fold_reports: list[MetricsReport] = []
        for f in folds:
            sel = [i for i, r in enumerate(rows) if int(r["fold"]) == f]
            fold_reports.append(evaluate(preds[sel], truth[sel], scores[sel]))
        pooled = evaluate(preds, truth, scores)
        entry = {"folds": {str(f): rep.to_dict() for f, rep in zip(folds, fold_reports)},
                 "pooled": pooled.to_dict()}
        if len(fold_reports) >= 2:
            entry["aggregate"] = aggregate_folds(fold_reports).to_dict()
        summary[exp] = entry

        cm = confusion(preds, truth)
        write_confusion_csv(cm, out_dir / f"{prefix}confusion.csv")
        curves = {}
        for lab in Label:
            if 0 < np.sum(truth == lab) < truth.size:
                curves[lab.name] = roc_auc(scores, truth, lab)
                write_roc_csv(curves[lab.name], out_dir / f"{prefix}roc_{lab.name}.csv")
        plot_roc(curves, out_dir / "plots" / f"{prefix}roc.png", title=f"ROC {exp}")
        plot_confusion(cm, out_dir / "plots" / f"{prefix}confusion.png", title=f"Normalized confusion {exp}")
        if curves:
            fpr, tpr = average_roc(list(curves.values()))
            avg_curves[exp] = (fpr, tpr, float(np.mean([c.auc for c in curves.values()])))
    if avg_curves:
        plot_average_roc(avg_curves, out_dir / "plots" / "average_roc.png")

    # subgroup tables need one common test set; use records every experiment scored
    common = sorted(set.intersection(*[{r["record_id"] for r in rows} for rows in preds_by_experiment.values()]))
    if common and all(rid in by_id for rid in common):
        recs = [by_id[rid] for rid in common]
        truth = [int(r.label) for r in recs]
        preds_map = {}
        for exp, rows in preds_by_experiment.items():
            lookup = {r["record_id"]: int(Label[r["pred"]]) for r in rows}
            preds_map[exp] = [lookup[rid] for rid in common]
        for factor in FACTORS:
            table = subgroup_table(truth, recs, factor, preds_map, Label.Covid19)
            table.write_csv(out_dir / f"subgroup_{factor}.csv")
    (out_dir / "metrics.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def gradcam_stage(net: CovidNet, records, images, out_dir: str | Path, zscore=IMAGENET_ZSCORE) -> None:
    out_dir = Path(out_dir)
    for rec, img in zip(records, images):
        x = to_input_tensor(img, zscore, net.cfg.input_size)
        probs = predict_proba(net, [img], zscore)[0]
        target = int(np.argmax(probs))
        heat = grad_cam(net, x, target)
        write_overlay(out_dir / f"{rec.record_id}_{Label(target).name}.png", render_overlay(img, heat))


def embed_stage(net: CovidNet, records, images, out_path: str | Path, perplexity: float = 30.0,
                iterations: int = 1000, seed: int = 0, zscore=IMAGENET_ZSCORE):
    feats = []
    for start in range(0, len(images), 32):
        batch = np.stack([to_input_tensor(im, zscore, net.cfg.input_size) for im in images[start:start + 32]])
        feats.append(penultimate_features(net, batch))
    features = np.concatenate(feats) if feats else np.zeros((0, net.cfg.dense_sizes[1]))
    points = project_2d(features, records, perplexity=perplexity, iterations=iterations, seed=seed)
    write_points_csv(points, out_path)
    return points


def versions() -> dict:
    import scipy
    import torch
    return {
        "covidcxr": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


def run(cfg: PipelineConfig) -> Path:
    """ingest -> preprocess -> train/predict per fold -> report -> gradcam -> embed."""
    from .plots import plot_embedding

    validate(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_manifest.json").write_text(json.dumps({
        "config": cfg.to_json(),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "versions": versions(),
    }, indent=1, sort_keys=True, default=str) + "\n")

    records = load_manifest(cfg.manifest)
    folds = make_folds(records, cfg.k, cfg.seed, cfg.patient_disjoint)
    save_folds(folds, out / "folds.json")

    windows = load_window_sidecar(cfg.window_sidecar) if cfg.window_sidecar else None
    preprocess_stage(records, out / "processed", cfg.mode, make_segmenter(cfg),
                     cfg.network.input_size, cfg.workers, windows)

    all_rows = []
    nets = {}
    for split in folds:
        log.info("fold %d: training", split.fold_index)
        net, _ = train_fold(cfg, records, split, out / "processed", out)
        nets[split.fold_index] = net
        test_recs, test_imgs = load_processed(
            [r for r in records if r.record_id in split.test_ids], out / "processed")
        rows = predict_records(net, test_recs, test_imgs, split.fold_index, cfg.train.zscore)
        write_predictions(rows, out / f"predictions_{split.fold_index}.csv")
        all_rows.extend(rows)
        gradcam_stage(net, test_recs, test_imgs, out / "gradcam", cfg.train.zscore)
    write_predictions(all_rows, out / "predictions.csv")
    report_stage({cfg.mode.value: all_rows}, records, out)

    kept, images = load_processed(records, out / "processed")
    points = embed_stage(nets[0], kept, images, out / "embed" / "points.csv",
                         cfg.tsne_perplexity, cfg.tsne_iterations, cfg.seed, cfg.train.zscore)
    plot_embedding(points, out / "plots" / "embedding_label.png", by="label")
    plot_embedding(points, out / "plots" / "embedding_source.png", by="source")
    return out


def load_fold_records(manifest: str | Path, folds_path: str | Path, fold: int):
    records = load_manifest(manifest)
    folds = load_folds(folds_path)
    matches = [f for f in folds if f.fold_index == fold]
    if not matches:
        raise ConfigError(f"fold {fold} not in {folds_path}")
    return records, matches[0]
