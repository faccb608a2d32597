"""Pixel-level primitives on 16-bit Monochrome2 rasters.

Images are 2-D ``uint16`` numpy arrays indexed ``[row, col]``; masks are 2-D
``bool`` arrays of the same shape. Larger stored values render brighter.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

MAX16 = 65535
INPUT_SIZE = 224


class ImageError(Exception):
    pass


class NonPositiveWidth(ImageError):
    pass


class EmptyRegion(ImageError):
    pass


class DimensionMismatch(ImageError):
    pass


class ImageTooSmall(ImageError):
    pass


class WrongDimensions(ImageError):
    pass


@dataclass(frozen=True)
class ZScoreParams:
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean and std need three components")
        if min(self.std) <= 0:
            raise ValueError("std components must be positive")


IMAGENET_ZSCORE = ZScoreParams()


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def as_gray16(img: np.ndarray) -> np.ndarray:
    """Validate a raster and promote 8-bit data to 16 bits (x257)."""
    img = np.asarray(img)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise WrongDimensions(f"expected a non-empty 2-D raster, got shape {img.shape}")
    if img.dtype == np.uint8:
        return img.astype(np.uint16) * 257
    if img.dtype != np.uint16:
        raise TypeError(f"expected uint8 or uint16 pixels, got {img.dtype}")
    return img


def read_png16(path: str | Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(str(path))
    if img.ndim == 3:
        raise ImageError(f"{path}: colour images are not supported")
    return as_gray16(img)


def write_png16(path: str | Path, img: np.ndarray) -> None:
    img = as_gray16(img)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), img):
        raise ImageError(f"could not write {path}")


def load_window_sidecar(path: str | Path) -> dict[str, tuple[float, float]]:
    """``{record_id: {"center": c, "width": w}}`` -> ``{record_id: (c, w)}``."""
    payload = json.loads(Path(path).read_text())
    return {rid: (float(v["center"]), float(v["width"])) for rid, v in payload.items()}


def apply_window(raw: np.ndarray, center: float, width: float) -> np.ndarray:
    """Map ``[center - width/2, center + width/2]`` linearly onto the full 16-bit range."""
    if not width > 0:
        raise NonPositiveWidth(f"window width must be > 0, got {width}")
    low = center - width / 2.0
    scaled = (np.asarray(raw, dtype=np.float64) - low) / width * MAX16
    return np.clip(_round_half_up(scaled), 0, MAX16).astype(np.uint16)


def equalize(img: np.ndarray, region: np.ndarray | None = None) -> np.ndarray:
    """Histogram equalization onto [0, 65535], optionally restricted to ``region``.

    Uses ``round((cdf(v) - cdf_min) / (N - cdf_min) * 65535)`` over the pixels
    of the region. Pixels outside the region are returned untouched. A region
    holding a single intensity has no spread to stretch and is passed through.
    """
    img = as_gray16(img)
    if region is None:
        values = img.ravel()
    else:
        region = np.asarray(region, dtype=bool)
        if region.shape != img.shape:
            raise DimensionMismatch(f"mask {region.shape} vs image {img.shape}")
        if not region.any():
            raise EmptyRegion("equalization region has no foreground pixels")
        values = img[region]

    levels, counts = np.unique(values, return_counts=True)
    cdf = np.cumsum(counts)
    n_pix = cdf[-1]
    cdf_min = cdf[0]
    if n_pix == cdf_min:
        return img.copy()
    lut = _round_half_up((cdf - cdf_min) / (n_pix - cdf_min) * MAX16).astype(np.uint16)
    mapped = lut[np.searchsorted(levels, values)]

    out = img.copy()
    if region is None:
        out = mapped.reshape(img.shape)
    else:
        out[region] = mapped
    return out


def resize_shortest(img: np.ndarray, target: int = INPUT_SIZE) -> np.ndarray:
    """Bilinear resize so the shorter side equals ``target``, keeping aspect ratio."""
    img = as_gray16(img)
    h, w = img.shape
    scale = target / min(h, w)
    new_h = target if h <= w else int(_round_half_up(h * scale))
    new_w = target if w <= h else int(_round_half_up(w * scale))
    if (new_h, new_w) == (h, w):
        return img.copy()
    return cv2.resize(img, (new_w, new_h), interpolation=cv2.INTER_LINEAR)


def center_crop(img: np.ndarray, side: int = INPUT_SIZE) -> np.ndarray:
    img = as_gray16(img)
    h, w = img.shape
    if h < side or w < side:
        raise ImageTooSmall(f"{h}x{w} image cannot yield a {side}x{side} crop")
    top = (h - side) // 2
    left = (w - side) // 2
    return img[top:top + side, left:left + side].copy()


def dilate(mask: np.ndarray, size: int = 5) -> np.ndarray:
    """Binary dilation with a ``size`` x ``size`` all-ones kernel; zero padding at borders."""
    mask = np.asarray(mask, dtype=bool)
    return ndimage.binary_dilation(mask, structure=np.ones((size, size), bool), border_value=0)


def to_network_size(img: np.ndarray, side: int = INPUT_SIZE) -> np.ndarray:
    return center_crop(resize_shortest(img, side), side)


def to_input_tensor(
    img: np.ndarray, params: ZScoreParams = IMAGENET_ZSCORE, size: int = INPUT_SIZE
) -> np.ndarray:
    """Replicate a ``size`` x ``size`` gray image into 3 z-scored channels (float32)."""
    img = as_gray16(img)
    if img.shape != (size, size):
        raise WrongDimensions(f"expected {size}x{size}, got {img.shape[0]}x{img.shape[1]}")
    unit = img.astype(np.float64) / MAX16
    mean = np.asarray(params.mean, dtype=np.float64)[:, None, None]
    std = np.asarray(params.std, dtype=np.float64)[:, None, None]
    return ((unit[None] - mean) / std).astype(np.float32)
