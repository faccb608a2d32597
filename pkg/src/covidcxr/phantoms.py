"""Synthetic chest phantoms with ground-truth lung masks.

Two bright elliptical lung fields on a dark, noisy background. Pneumonia
phantoms carry one dense consolidation in a lower lung zone; COVID-19 phantoms
carry several fainter, peripheral, bilateral patches.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .corpus import ImageRecord, Label, Projection, Sensor, Sex, Source, write_manifest
from .imgproc import MAX16, write_png16


@dataclass
class Phantom:
    image: np.ndarray  # uint16
    mask: np.ndarray  # bool, union of the two lung ellipses
    label: Label


def _ellipse(shape, center, axes) -> np.ndarray:
    rows, cols = np.ogrid[: shape[0], : shape[1]]
    return ((rows - center[0]) / axes[0]) ** 2 + ((cols - center[1]) / axes[1]) ** 2 <= 1.0


def _blob(shape, center, sigma) -> np.ndarray:
    rows, cols = np.ogrid[: shape[0], : shape[1]]
    d2 = (rows - center[0]) ** 2 + (cols - center[1]) ** 2
    return np.exp(-d2 / (2 * sigma ** 2))


def lung_geometry(shape, rng: np.random.Generator):
    h, w = shape
    cr = h * (0.5 + rng.uniform(-0.03, 0.03))
    a = h * rng.uniform(0.30, 0.34)
    b = w * rng.uniform(0.13, 0.16)
    gap = w * rng.uniform(0.19, 0.22)
    cc = w * (0.5 + rng.uniform(-0.02, 0.02))
    return [((cr, cc - gap), (a, b)), ((cr, cc + gap), (a, b))]


def make_phantom(
    label: Label, rng: np.random.Generator, shape: tuple[int, int] = (288, 256)
) -> Phantom:
    h, w = shape
    lungs = lung_geometry(shape, rng)
    masks = [_ellipse(shape, c, ax) for c, ax in lungs]
    mask = masks[0] | masks[1]

    rows = np.linspace(0.0, 1.0, h)[:, None]
    img = 0.10 + 0.06 * rows + np.zeros((1, w))
    texture = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=3.0)
    texture /= texture.std() + 1e-12
    img = np.where(mask, 0.55 + 0.01 * texture, img)

    opacity = np.zeros(shape)
    scale = min(h, w)
    if label == Label.Pneumonia:
        side = int(rng.integers(2))
        (cr, cc), (a, b) = lungs[side]
        center = (cr + a * rng.uniform(0.25, 0.5), cc + b * rng.uniform(-0.3, 0.3))
        opacity += 0.28 * _blob(shape, center, scale * rng.uniform(0.08, 0.10))
    elif label == Label.Covid19:
        for side in (0, 1):
            (cr, cc), (a, b) = lungs[side]
            outward = -1.0 if side == 0 else 1.0
            for _ in range(int(rng.integers(2, 4))):
                center = (
                    cr + a * rng.uniform(-0.6, 0.6),
                    cc + outward * b * rng.uniform(0.35, 0.7),
                )
                opacity += 0.22 * _blob(shape, center, scale * rng.uniform(0.04, 0.055))
    img = img + opacity * mask
    img = img + 0.01 * rng.standard_normal(shape)
    img = np.clip(img, 0.0, 1.0)
    return Phantom(np.round(img * MAX16).astype(np.uint16), mask, label)


def random_shape(rng: np.random.Generator, low: int = 240, high: int = 320) -> tuple[int, int]:
    return int(rng.integers(low, high + 1)), int(rng.integers(low, high + 1))


def make_corpus(
    out_dir: str | Path,
    n_per_class: int = 30,
    seed: int = 0,
    size_range: tuple[int, int] = (240, 320),
    repeat_fraction: float = 0.2,
) -> list[ImageRecord]:
    """Write a phantom corpus: ``images/``, ``masks/`` and ``manifest.csv``.

    About ``repeat_fraction`` of patients contribute two images, so
    patient-disjoint splitting has something to do.
    """
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    records: list[ImageRecord] = []
    for label in Label:
        made = 0
        patient = 0
        while made < n_per_class:
            pid = f"{label.name[:3].lower()}{patient:04d}"
            n_images = 2 if (rng.random() < repeat_fraction and n_per_class - made >= 2) else 1
            sex = Sex.M if rng.random() < 0.6 else Sex.F
            age = float(rng.integers(20, 90))
            for _ in range(n_images):
                rid = f"{pid}_{made:03d}"
                ph = make_phantom(label, rng, random_shape(rng, *size_range))
                write_png16(out / "images" / f"{rid}.png", ph.image)
                write_png16(out / "masks" / f"{rid}.png", ph.mask.astype(np.uint16) * MAX16)
                records.append(ImageRecord(
                    record_id=rid,
                    image_path=f"images/{rid}.png",
                    label=label,
                    patient_id=pid,
                    source=Source.Synthetic,
                    projection=Projection.AP if rng.random() < 0.7 else Projection.PA,
                    sensor=Sensor.CR if rng.random() < 0.7 else Sensor.DX,
                    sex=sex,
                    age=age,
                ))
                made += 1
            patient += 1
    write_manifest(records, out / "manifest.csv")
    return records
