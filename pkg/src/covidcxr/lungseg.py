"""Lung segmentation and the raw / crop / segment preprocessing pipelines."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

import cv2
import numpy as np
import torch
from scipy import ndimage
from torch import nn
from torch.nn import functional as F

from .imgproc import MAX16, as_gray16, dilate, equalize

log = logging.getLogger(__name__)


class EmptyMask(Exception):
    pass


class PreprocessMode(str, Enum):
    Raw = "raw"
    Crop = "crop"
    Segment = "segment"


@dataclass(frozen=True)
class BoundingSquare:
    center_row: float
    center_col: float
    side: int

    def __post_init__(self):
        if self.side < 1:
            raise ValueError("side must be >= 1")


class Segmenter(Protocol):
    def segment(self, img: np.ndarray) -> np.ndarray: ...


def otsu_threshold(values: np.ndarray, bins: int = 1024) -> float:
    hist, edges = np.histogram(values, bins=bins)
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    m0 = s0 / np.maximum(w0, 1)
    m1 = (s0[-1] - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (m0 - m1) ** 2
    return float(centers[int(np.argmax(between))])


class HeuristicSegmenter:
    """Otsu threshold on a smoothed image, keeping the two largest components.

    ``lungs_bright`` selects the polarity; set it False for radiographs where
    aerated lung renders dark.
    """

    def __init__(self, smooth_sigma: float = 2.0, lungs_bright: bool = True):
        self.smooth_sigma = smooth_sigma
        self.lungs_bright = lungs_bright

    def segment(self, img: np.ndarray) -> np.ndarray:
        img = as_gray16(img)
        if img.min() == img.max():
            return np.zeros(img.shape, dtype=bool)
        smooth = ndimage.gaussian_filter(img.astype(np.float64), self.smooth_sigma)
        t = otsu_threshold(smooth)
        fg = smooth > t if self.lungs_bright else smooth < t
        labels, n = ndimage.label(fg)
        if n == 0:
            return np.zeros(img.shape, dtype=bool)
        sizes = ndimage.sum_labels(fg, labels, index=np.arange(1, n + 1))
        keep = np.argsort(sizes, kind="stable")[::-1][:2] + 1
        mask = np.isin(labels, keep)
        return ndimage.binary_fill_holes(mask)


def _block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder with skip connections; ``depth`` pooling levels."""

    def __init__(self, base: int = 8, depth: int = 4):
        super().__init__()
        widths = [base * 2 ** i for i in range(depth + 1)]
        self.down = nn.ModuleList([_block(1, widths[0])])
        self.down.extend(_block(widths[i], widths[i + 1]) for i in range(depth))
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in reversed(range(depth))
        )
        self.merge = nn.ModuleList(_block(2 * widths[i], widths[i]) for i in reversed(range(depth)))
        self.out = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            x = block(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        skips.pop()
        for up, merge in zip(self.up, self.merge):
            x = merge(torch.cat([skips.pop(), up(x)], dim=1))
        return self.out(x)


def dice_bce_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    bce = F.binary_cross_entropy_with_logits(logits, target)
    prob = torch.sigmoid(logits)
    inter = (prob * target).sum(dim=(1, 2, 3))
    denom = prob.sum(dim=(1, 2, 3)) + target.sum(dim=(1, 2, 3))
    dice = (2 * inter + eps) / (denom + eps)
    return bce + (1 - dice).mean()


class LearnedUNet:
    """U-Net segmenter working on a fixed ``size`` x ``size`` grid.

    Inference is read-only (eval mode, no grad) so one instance can be shared
    between threads.
    """

    def __init__(self, size: int = 128, base: int = 8, depth: int = 4, seed: int = 0):
        self.size = size
        self.base = base
        self.depth = depth
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = UNet(base, depth)
        self.net.eval()

    def _prepare(self, img: np.ndarray) -> torch.Tensor:
        small = cv2.resize(as_gray16(img), (self.size, self.size), interpolation=cv2.INTER_AREA)
        return torch.from_numpy(small.astype(np.float32) / MAX16)[None]

    def fit(
        self,
        images: Sequence[np.ndarray],
        masks: Sequence[np.ndarray],
        epochs: int = 20,
        batch_size: int = 8,
        lr: float = 1e-3,
        seed: int = 0,
    ) -> list[float]:
        gen = torch.Generator().manual_seed(seed)
        x = torch.stack([self._prepare(im) for im in images])
        y = torch.stack([
            torch.from_numpy(
                cv2.resize(m.astype(np.uint8), (self.size, self.size), interpolation=cv2.INTER_NEAREST)
            ).float()[None]
            for m in masks
        ])
        opt = torch.optim.Adam(self.net.parameters(), lr=lr)
        losses = []
        self.net.train()
        for _ in range(epochs):
            order = torch.randperm(len(x), generator=gen)
            total = 0.0
            for start in range(0, len(x), batch_size):
                idx = order[start:start + batch_size]
                opt.zero_grad()
                loss = dice_bce_loss(self.net(x[idx]), y[idx])
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            losses.append(total / len(x))
        self.net.eval()
        return losses

    def segment(self, img: np.ndarray) -> np.ndarray:
        img = as_gray16(img)
        with torch.no_grad():
            logits = self.net(self._prepare(img)[None])[0, 0].numpy()
        small = (logits > 0).astype(np.uint8)
        h, w = img.shape
        return cv2.resize(small, (w, h), interpolation=cv2.INTER_NEAREST).astype(bool)

    def save(self, path: str | Path) -> None:
        torch.save({"size": self.size, "base": self.base, "depth": self.depth,
                    "state": self.net.state_dict()}, path)

    @classmethod
    def load(cls, path: str | Path) -> "LearnedUNet":
        ckpt = torch.load(path, weights_only=True)
        seg = cls(size=ckpt["size"], base=ckpt["base"], depth=ckpt["depth"])
        seg.net.load_state_dict(ckpt["state"])
        seg.net.eval()
        return seg


def segment_lungs(segmenter: Segmenter, img: np.ndarray) -> np.ndarray:
    mask = np.asarray(segmenter.segment(img), dtype=bool)
    if mask.shape != np.shape(img):
        raise ValueError(f"segmenter returned {mask.shape} for a {np.shape(img)} image")
    if not mask.any():
        raise EmptyMask("segmentation produced no foreground")
    return mask


def bounding_square(mask: np.ndarray) -> BoundingSquare:
    """Square ROI from the row/column extents of the mask foreground.

    Each axis gives a segment ``[first, last]``; the square is centred on both
    segment midpoints and its side is the longer segment length.
    """
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise EmptyMask("bounding square of an empty mask")
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    side = max(r1 - r0 + 1, c1 - c0 + 1)
    return BoundingSquare((r0 + r1) / 2, (c0 + c1) / 2, side)


def _window_start(center: float, side: int, extent: int) -> int:
    if side >= extent:
        # square spans the whole axis: centre the source inside the canvas
        return -((side - extent) // 2)
    return int(math.floor(center - (side - 1) / 2))


def crop_to_square(img: np.ndarray, sq: BoundingSquare) -> np.ndarray:
    """``side`` x ``side`` window centred on the square; out-of-image area is zero."""
    img = np.asarray(img)
    h, w = img.shape
    top = _window_start(sq.center_row, sq.side, h)
    left = _window_start(sq.center_col, sq.side, w)
    out = np.zeros((sq.side, sq.side), dtype=img.dtype)
    sr0, sr1 = max(top, 0), min(top + sq.side, h)
    sc0, sc1 = max(left, 0), min(left + sq.side, w)
    if sr0 < sr1 and sc0 < sc1:
        out[sr0 - top:sr1 - top, sc0 - left:sc1 - left] = img[sr0:sr1, sc0:sc1]
    return out


def segment_with_mask(img: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Segment-mode steps given a lung mask; returns the image and its dilated mask."""
    sq = bounding_square(mask)
    cropped = crop_to_square(as_gray16(img), sq)
    region = dilate(crop_to_square(mask.astype(bool), sq), 5)
    cropped[~region] = 0
    return equalize(cropped, region), region


def preprocess(
    img: np.ndarray, mode: PreprocessMode | str, segmenter: Segmenter | None = None
) -> np.ndarray:
    mode = PreprocessMode(mode)
    img = as_gray16(img)
    if mode is PreprocessMode.Raw:
        return equalize(img)
    if segmenter is None:
        raise ValueError(f"mode {mode.value} needs a segmenter")
    mask = segment_lungs(segmenter, img)
    if mode is PreprocessMode.Crop:
        return equalize(crop_to_square(img, bounding_square(mask)))
    return segment_with_mask(img, mask)[0]
