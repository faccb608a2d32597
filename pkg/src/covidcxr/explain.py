"""Grad-CAM heat maps and 2-D t-SNE projection of penultimate features."""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch
from matplotlib import colormaps
from torch.nn import functional as F

from .corpus import ImageRecord

log = logging.getLogger(__name__)


class TooFewPoints(ValueError):
    pass


def _as_batch(net, x) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    t = torch.as_tensor(np.asarray(x), dtype=dtype)
    return t[None] if t.ndim == 3 else t


def grad_cam_raw(net, x, target: int) -> np.ndarray:
    """ReLU of the gradient-weighted sum of final feature maps, at feature-map resolution.

    ``net`` must provide ``forward_features`` and ``head``. Channel weights are
    the spatial means of d(score_target)/d(maps), taken on the pre-softmax score.
    """
    net.eval()
    xb = _as_batch(net, x)
    with torch.no_grad():
        maps = net.forward_features(xb)
    maps = maps.detach().requires_grad_(True)
    score = net.head(maps)[0, int(target)]
    grads = None
    if score.requires_grad:
        grads = torch.autograd.grad(score, maps, allow_unused=True)[0]
    if grads is None:
        grads = torch.zeros_like(maps)
    alpha = grads.mean(dim=(2, 3), keepdim=True)
    cam = torch.relu((alpha * maps).sum(dim=1))[0]
    return cam.detach().double().numpy()


def grad_cam(net, x, target: int) -> np.ndarray:
    """Heat map in [0, 1] at the input's spatial size (bilinear upsampling, max-normalised)."""
    xb = _as_batch(net, x)
    raw = grad_cam_raw(net, xb, target)
    h, w = xb.shape[-2:]
    up = F.interpolate(torch.from_numpy(raw)[None, None], size=(h, w), mode="bilinear",
                       align_corners=False)[0, 0].numpy()
    up = np.maximum(up, 0.0)
    peak = up.max()
    return up / peak if peak > 0 else np.zeros_like(up)


def render_overlay(gray: np.ndarray, heat: np.ndarray, opacity: float = 0.4,
                   cmap: str = "inferno") -> np.ndarray:
    """RGB uint8 composite of a gray image and a heat map."""
    g = np.asarray(gray, dtype=np.float64)
    span = g.max() - g.min()
    g = (g - g.min()) / span if span > 0 else np.zeros_like(g)
    if heat.shape != g.shape:
        heat = cv2.resize(heat, (g.shape[1], g.shape[0]), interpolation=cv2.INTER_LINEAR)
    color = colormaps[cmap](np.clip(heat, 0, 1))[..., :3]
    rgb = (1 - opacity) * g[..., None] + opacity * color
    return np.round(rgb * 255).astype(np.uint8)


def write_overlay(path: str | Path, rgb: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR))


def penultimate_features(net, x) -> np.ndarray:
    """Last hidden dense activations; 1-D for one input, 2-D for a batch."""
    net.eval()
    single = np.ndim(x) == 3
    with torch.no_grad():
        feats = net.penultimate(_as_batch(net, x)).double().numpy()
    return feats[0] if single else feats


# --- t-SNE -----------------------------------------------------------------


def _conditional_probabilities(d2: np.ndarray, perplexity: float, tol: float = 1e-5,
                               max_steps: int = 200) -> np.ndarray:
    """Row-wise Gaussian affinities whose entropy matches ``log(perplexity)``."""
    n = d2.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        d = np.delete(d2[i], i)
        d = d - d.min()
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_steps):
            p = np.exp(-d * beta)
            s = p.sum()
            entropy = np.log(s) + beta * np.dot(d, p) / s
            diff = entropy - target
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        P[i, np.arange(n) != i] = p / s
    return P


def _point_seed(row: np.ndarray, seed: int) -> int:
    digest = hashlib.blake2b(np.ascontiguousarray(row, dtype=np.float64).tobytes(),
                             digest_size=8, key=str(seed).encode()).digest()
    return int.from_bytes(digest, "little")


@dataclass
class TSNEResult:
    embedding: np.ndarray
    kl_history: list[float] = field(default_factory=list)
    perplexity: float = 30.0


def tsne(
    features,
    perplexity: float = 30.0,
    iterations: int = 1000,
    seed: int = 0,
    early_exaggeration: float = 12.0,
    exaggeration_iters: int = 250,
    learning_rate: float | None = None,
) -> TSNEResult:
    """Exact t-SNE (Student-t kernel, KL divergence, gradient descent with gains).

    Initial positions are drawn per point from a hash of its feature vector
    and ``seed``, and the optimisation runs over the rows in lexicographic
    order. Permuting the input therefore permutes the output exactly, and
    duplicate vectors start, and stay, together.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise TooFewPoints("need at least one feature vector")
    if perplexity < 2:
        raise ValueError("perplexity must be >= 2")
    n = X.shape[0]
    if n == 1:
        return TSNEResult(np.zeros((1, 2)), [], perplexity)
    eff_perp = min(perplexity, max((n - 1) / 3.0, 1.0))
    if eff_perp < perplexity:
        log.warning("perplexity %.1f too large for %d points, using %.2f", perplexity, n, eff_perp)

    # canonical row order: float sums then do not depend on the caller's order
    order = np.lexsort(X.T[::-1])
    X = X[order]
    sq = np.sum(X * X, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0)
    P = _conditional_probabilities(d2, eff_perp)
    P = (P + P.T) / (2 * n)
    P = np.maximum(P, 1e-12)
    np.fill_diagonal(P, 0.0)

    Y = np.stack([np.random.default_rng(_point_seed(row, seed)).normal(0, 1e-4, 2) for row in X])
    lr = learning_rate if learning_rate is not None else max(n / early_exaggeration, 50.0)
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    off_diag = ~np.eye(n, dtype=bool)
    kl_history = []
    for it in range(iterations):
        exaggerate = it < exaggeration_iters
        Pe = P * early_exaggeration if exaggerate else P
        momentum = 0.5 if exaggerate else 0.8
        sy = np.sum(Y * Y, axis=1)
        num = 1.0 / (1.0 + np.maximum(sy[:, None] + sy[None, :] - 2 * Y @ Y.T, 0.0))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (Pe - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
        kl_history.append(float(np.sum(P[off_diag] * np.log(P[off_diag] / Q[off_diag]))))
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - lr * gains * grad
        Y = Y + velocity
    out = np.empty_like(Y)
    out[order] = Y
    return TSNEResult(out, kl_history, eff_perp)


@dataclass(frozen=True)
class EmbeddingPoint:
    x: float
    y: float
    record_id: str = ""
    label: str = ""
    source: str = ""


def project_2d(
    features,
    records: Sequence[ImageRecord] | None = None,
    perplexity: float = 30.0,
    iterations: int = 1000,
    seed: int = 0,
) -> list[EmbeddingPoint]:
    result = tsne(features, perplexity=perplexity, iterations=iterations, seed=seed)
    points = []
    for i, (x, y) in enumerate(result.embedding):
        if records is None:
            points.append(EmbeddingPoint(float(x), float(y)))
        else:
            r = records[i]
            points.append(EmbeddingPoint(float(x), float(y), r.record_id, r.label.name, r.source.value))
    return points


def write_points_csv(points: Sequence[EmbeddingPoint], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "record_id", "label", "source"])
        for p in points:
            writer.writerow([repr(p.x), repr(p.y), p.record_id, p.label, p.source])


def read_points_csv(path: str | Path) -> list[EmbeddingPoint]:
    with Path(path).open(newline="") as fh:
        return [EmbeddingPoint(float(r["x"]), float(r["y"]), r["record_id"], r["label"], r["source"])
                for r in csv.DictReader(fh)]
