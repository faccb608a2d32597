"""COVID-Net-style classifier, weighted cross-entropy, augmentation and training."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from .corpus import NUM_CLASSES, Label
from .imgproc import IMAGENET_ZSCORE, INPUT_SIZE, MAX16, ZScoreParams, as_gray16, to_input_tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

AUGMENT_OPS = ("flip", "rotate", "scale", "elastic", "noise")


class InvalidConfig(ValueError):
    pass


class EmptySet(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class NetworkConfig:
    backbone_channels: tuple[int, ...] = (32, 64, 128, 256)
    dense_sizes: tuple[int, int] = (128, 64)
    dropout_rate: float = 0.3
    num_classes: int = NUM_CLASSES
    in_channels: int = 3
    input_size: int = INPUT_SIZE
    batch_norm: bool = True

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.dense_sizes = tuple(int(d) for d in self.dense_sizes)
        if not 0 <= self.dropout_rate < 1:
            raise InvalidConfig("dropout_rate must lie in [0, 1)")
        if self.num_classes != NUM_CLASSES:
            raise InvalidConfig(f"num_classes must be {NUM_CLASSES}")
        if len(self.dense_sizes) != 2 or min(self.dense_sizes) < 1:
            raise InvalidConfig("dense_sizes needs two positive widths")
        if not self.backbone_channels or min(self.backbone_channels) < 1:
            raise InvalidConfig("backbone needs at least one positive width")
        if self.input_size % 2 ** len(self.backbone_channels):
            raise InvalidConfig("input_size must be divisible by 2**len(backbone_channels)")

    @property
    def feature_size(self) -> int:
        return self.input_size // 2 ** len(self.backbone_channels)


@dataclass
class TrainConfig:
    learning_rate: float = 2e-5
    epochs: int = 24
    batch_size: int = 32
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    seed: int = 0
    class_weights: dict[Label, float] | None = None
    augment_classes: frozenset[Label] = frozenset({Label.Pneumonia, Label.Covid19})
    op_probability: float = 0.5
    flip_probability: float = 0.5
    noise_variance: float = 0.015
    rotation_degrees: float = 10.0
    scale_range: float = 0.10
    elastic_alpha: float = 34.0
    elastic_sigma: float = 4.0
    zscore: ZScoreParams = field(default_factory=ZScoreParams)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be > 0")
        if not 0 < self.plateau_factor < 1:
            raise InvalidConfig("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise InvalidConfig("plateau_patience must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidConfig("epochs must be >= 0 and batch_size >= 1")
        self.augment_classes = frozenset(Label(c) for c in self.augment_classes)
        if self.class_weights is not None:
            self.class_weights = {Label(k): float(v) for k, v in self.class_weights.items()}

    def weight_vector(self) -> np.ndarray:
        if self.class_weights is None:
            return np.ones(NUM_CLASSES)
        return np.array([self.class_weights[lab] for lab in Label], dtype=np.float64)


class CovidNet(nn.Module):
    """Conv stages -> flatten -> two dense+ReLU+dropout layers -> class scores.

    ``forward_features`` yields the final convolutional feature maps and
    ``head`` maps them to logits, so gradient-based localisation can hook in
    between; ``penultimate`` returns the last hidden dense activations.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        c_in = cfg.in_channels
        for width in cfg.backbone_channels:
            layers.append(nn.Conv2d(c_in, width, 3, padding=1))
            if cfg.batch_norm:
                layers.append(nn.BatchNorm2d(width))
            layers += [nn.ReLU(), nn.MaxPool2d(2)]
            c_in = width
        self.features = nn.Sequential(*layers)
        flat = c_in * cfg.feature_size ** 2
        d1, d2 = cfg.dense_sizes
        self.fc1 = nn.Linear(flat, d1)
        self.fc2 = nn.Linear(d1, d2)
        self.fc3 = nn.Linear(d2, cfg.num_classes)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)

    def _hidden(self, maps: torch.Tensor) -> torch.Tensor:
        h = self.dropout(torch.relu(self.fc1(torch.flatten(maps, 1))))
        return torch.relu(self.fc2(h))

    def head(self, maps: torch.Tensor) -> torch.Tensor:
        return self.fc3(self.dropout(self._hidden(maps)))

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        return self._hidden(self.forward_features(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.forward_features(x))


def build_network(cfg: NetworkConfig | None = None, seed: int = 0) -> CovidNet:
    cfg = cfg or NetworkConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = CovidNet(cfg)
    return net.eval()


def weighted_ce(probs, label, weights=None) -> float:
    """``-w[label] * ln(p[label])`` for one sample; probabilities floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    w = 1.0 if weights is None else float(np.asarray(_as_weight_vector(weights))[int(label)])
    return float(-w * math.log(max(probs[int(label)], PROB_FLOOR)))


def _as_weight_vector(weights) -> np.ndarray:
    if isinstance(weights, dict):
        return np.array([weights[lab] for lab in Label], dtype=np.float64)
    return np.asarray(weights, dtype=np.float64)


def weighted_ce_loss(probs: torch.Tensor, targets: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Batch mean of the per-sample weighted cross-entropy on softmax outputs."""
    picked = probs.gather(1, targets[:, None]).squeeze(1)
    return (-weights[targets] * torch.log(picked.clamp_min(PROB_FLOOR))).mean()


def augment(
    img: np.ndarray,
    label: Label,
    cfg: TrainConfig,
    seed,
    ops: Sequence[str] | None = None,
) -> np.ndarray:
    """Class-conditional augmentation of a 16-bit image.

    Images whose label is not in ``cfg.augment_classes`` come back unchanged.
    Otherwise each op is drawn independently (flip with ``flip_probability``,
    the rest with ``op_probability``) unless ``ops`` names them explicitly.
    """
    img = as_gray16(img)
    if Label(label) not in cfg.augment_classes:
        return img
    rng = np.random.default_rng(seed)
    if ops is None:
        chosen = {op for op in AUGMENT_OPS
                  if rng.random() < (cfg.flip_probability if op == "flip" else cfg.op_probability)}
    else:
        unknown = set(ops) - set(AUGMENT_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
        chosen = set(ops)

    x = img.astype(np.float64) / MAX16
    h, w = x.shape
    if "flip" in chosen:
        x = x[:, ::-1]
    if "rotate" in chosen:
        angle = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees)
        x = ndimage.rotate(x, angle, reshape=False, order=1, mode="nearest")
    if "scale" in chosen:
        s = 1.0 + rng.uniform(-cfg.scale_range, cfg.scale_range)
        center = np.array([(h - 1) / 2, (w - 1) / 2])
        x = ndimage.affine_transform(x, np.eye(2) / s, offset=center - center / s,
                                     order=1, mode="nearest")
    if "elastic" in chosen:
        dr = ndimage.gaussian_filter(rng.uniform(-1, 1, x.shape), cfg.elastic_sigma) * cfg.elastic_alpha
        dc = ndimage.gaussian_filter(rng.uniform(-1, 1, x.shape), cfg.elastic_sigma) * cfg.elastic_alpha
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        x = ndimage.map_coordinates(x, [rows + dr, cols + dc], order=1, mode="reflect")
    if "noise" in chosen:
        x = x + rng.normal(0.0, math.sqrt(cfg.noise_variance), x.shape)
    x = np.clip(x, 0.0, 1.0)
    return np.floor(x * MAX16 + 0.5).astype(np.uint16)


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 3):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


TrainHistory = list[EpochStats]


def write_history_csv(history: TrainHistory, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for e in history:
            writer.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.lr)])


Item = tuple[np.ndarray, Label]


def _stack(images: Sequence[np.ndarray], zscore: ZScoreParams, size: int) -> torch.Tensor:
    return torch.from_numpy(np.stack([to_input_tensor(im, zscore, size) for im in images]))


def evaluate_loss(net: CovidNet, items: Sequence[Item], cfg: TrainConfig) -> float:
    weights = torch.as_tensor(cfg.weight_vector(), dtype=torch.float32)
    probs = predict_proba(net, [im for im, _ in items], cfg.zscore, cfg.batch_size)
    targets = torch.as_tensor([int(lab) for _, lab in items])
    return float(weighted_ce_loss(torch.from_numpy(probs).float(), targets, weights))


def train(
    net: CovidNet,
    train_items: Sequence[Item],
    val_items: Sequence[Item],
    cfg: TrainConfig,
    val_loss_fn: Callable[[CovidNet], float] | None = None,
) -> tuple[CovidNet, TrainHistory]:
    """Adam with online augmentation and a validation-driven plateau schedule.

    ``train_items``/``val_items`` are already-preprocessed network-size images
    with their labels. ``val_loss_fn`` replaces the validation loss, which is
    how the schedule is exercised in isolation.
    """
    if not train_items or not val_items:
        raise EmptySet("training and validation sets must be non-empty")
    size = net.cfg.input_size
    weights = torch.as_tensor(cfg.weight_vector(), dtype=torch.float32)
    schedule = PlateauSchedule(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    val_loss_fn = val_loss_fn or (lambda n: evaluate_loss(n, val_items, cfg))
    torch.manual_seed(cfg.seed)
    history: TrainHistory = []
    for epoch in range(1, cfg.epochs + 1):
        lr = schedule.lr
        for group in opt.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_items))
        aug_seeds = rng.integers(0, 2 ** 63, size=len(train_items))
        net.train()
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images = [augment(train_items[i][0], train_items[i][1], cfg, aug_seeds[i]) for i in idx]
            x = _stack(images, cfg.zscore, size)
            y = torch.as_tensor([int(train_items[i][1]) for i in idx])
            opt.zero_grad()
            loss = weighted_ce_loss(torch.softmax(net(x), dim=1), y, weights)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}, batch at {start}: loss {loss.item()}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        net.eval()
        val_loss = float(val_loss_fn(net))
        if not math.isfinite(val_loss):
            raise NonFiniteLoss(f"epoch {epoch}: validation loss {val_loss}")
        history.append(EpochStats(epoch, total / seen, val_loss, lr))
        log.info("epoch %d train %.4f val %.4f lr %.3g", epoch, total / seen, val_loss, lr)
        schedule.step(val_loss)
    net.eval()
    return net, history


def predict_proba(
    net: CovidNet,
    images: Sequence[np.ndarray],
    zscore: ZScoreParams = IMAGENET_ZSCORE,
    batch_size: int = 32,
) -> np.ndarray:
    """Softmax outputs, shape ``(N, 3)``, for network-size gray images."""
    net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = _stack(images[start:start + batch_size], zscore, net.cfg.input_size)
            out.append(torch.softmax(net(x), dim=1).double().numpy())
    if not out:
        return np.zeros((0, NUM_CLASSES))
    return np.concatenate(out)


def decide(probs) -> Label:
    """Highest probability wins; ties go to the lowest class index."""
    return Label(int(np.argmax(np.asarray(probs))))


def predict(net: CovidNet, x: np.ndarray) -> tuple[np.ndarray, Label]:
    """Class probabilities and decision for one ``(3, H, W)`` input tensor."""
    net.eval()
    with torch.no_grad():
        t = torch.as_tensor(np.asarray(x), dtype=next(net.parameters()).dtype)[None]
        probs = torch.softmax(net(t), dim=1)[0].double().numpy()
    return probs, decide(probs)


def save_checkpoint(net: CovidNet, path: str | Path, epoch: int = 0, seed: int = 0) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "network_config": asdict(net.cfg),
        "state": net.state_dict(),
        "epoch": epoch,
        "seed": seed,
    }, path)


def load_checkpoint(path: str | Path) -> tuple[CovidNet, dict]:
    ckpt = torch.load(path, weights_only=True)
    net = CovidNet(NetworkConfig(**ckpt["network_config"]))
    net.load_state_dict(ckpt["state"])
    return net.eval(), ckpt
