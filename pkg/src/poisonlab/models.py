"""Desk-scale classifier training.

A compact convolutional network on small inputs stands in for the
full-scale backbones; training follows the usual SGD-with-momentum plus
cosine-annealing recipe and is reproducible from a single seed at the
metrics level.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import LabeledDataset


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    schedule: str = "cosine"  # cosine | constant
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augment: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.epochs, self.batch_size) < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule: {self.schedule}")


class SmallConvNet(nn.Module):
    """Six 3x3 conv layers with BN, two max-pools, global average pooling."""

    def __init__(self, num_classes: int, channels: int = 3) -> None:
        super().__init__()
        widths = (16, 16, 32, 32, 64, 64)
        layers = []
        prev = channels
        for i, w in enumerate(widths):
            layers += [nn.Conv2d(prev, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            if i in (1, 3):
                layers.append(nn.MaxPool2d(2))
            prev = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(widths[-1], num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.features(x)
        z = F.adaptive_avg_pool2d(z, 1).flatten(1)
        return self.head(z)


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    # NHWC uint8 -> NCHW float in [-1, 1]; copy because source arrays are
    # frozen read-only by the dataset layer
    arr = np.ascontiguousarray(images)
    if not arr.flags.writeable:
        arr = arr.copy()
    x = torch.from_numpy(arr).float().div_(255.0)
    return x.permute(0, 3, 1, 2).sub_(0.5).div_(0.5)


def _stack_dataset(dataset: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in dataset.samples])
    labels = np.array([s.label for s in dataset.samples], dtype=np.int64)
    return images, labels


def _augment_batch(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    n, _, h, w = x.shape
    pad = max(2, h // 16)
    x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    out = torch.empty((n, x.shape[1], h, w), dtype=x.dtype)
    offs = torch.randint(0, 2 * pad + 1, (n, 2), generator=gen)
    flips = torch.rand(n, generator=gen) < 0.5
    for i in range(n):
        dy, dx = int(offs[i, 0]), int(offs[i, 1])
        crop = x[i, :, dy:dy + h, dx:dx + w]
        out[i] = torch.flip(crop, dims=[2]) if flips[i] else crop
    return out


@dataclass
class ClassifierModel:
    """Trained predictor over (H, W, C) uint8 rasters."""

    net: SmallConvNet
    num_classes: int
    train_accuracy: float = 0.0
    seed: int = 0

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self.predict_scores(images, batch_size).argmax(axis=1)

    def predict_scores(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        self.net.eval()
        outs = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                x = _to_tensor(images[i:i + batch_size])
                outs.append(self.net(x).numpy())
        return np.concatenate(outs, axis=0)

    def embed(self, image: np.ndarray) -> np.ndarray:
        """L2-normalized penultimate features for one image (verification)."""
        self.net.eval()
        with torch.no_grad():
            x = _to_tensor(image[None])
            z = F.adaptive_avg_pool2d(self.net.features(x), 1).flatten(1).numpy()[0]
        norm = np.linalg.norm(z)
        return z / norm if norm > 0 else z

    def save(self, path: Path | str) -> None:
        torch.save({
            "state_dict": self.net.state_dict(),
            "num_classes": self.num_classes,
            "channels": self.net.features[0].in_channels,
            "train_accuracy": self.train_accuracy,
            "seed": self.seed,
        }, path)

    @classmethod
    def load(cls, path: Path | str) -> "ClassifierModel":
        blob = torch.load(path, map_location="cpu", weights_only=True)
        net = SmallConvNet(blob["num_classes"], channels=blob.get("channels", 3))
        net.load_state_dict(blob["state_dict"])
        net.eval()
        return cls(net=net, num_classes=blob["num_classes"],
                   train_accuracy=blob.get("train_accuracy", 0.0), seed=blob.get("seed", 0))


def train_classifier(dataset: LabeledDataset, config: TrainConfig) -> ClassifierModel:
    """Train the desk-scale classifier; aborts with diagnostics on NaN loss."""
    if dataset.num_classes < 2:
        raise ValueError("training needs at least 2 classes")
    torch.manual_seed(config.seed)
    images, labels = _stack_dataset(dataset)
    net = SmallConvNet(dataset.num_classes, channels=images.shape[3])
    opt = torch.optim.SGD(net.parameters(), lr=config.learning_rate,
                          momentum=config.momentum, weight_decay=config.weight_decay)
    sched = None
    if config.schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
    gen = torch.Generator().manual_seed(config.seed)
    n = len(images)
    y_all = torch.from_numpy(labels)
    last_acc = 0.0
    for epoch in range(config.epochs):
        net.train()
        order = torch.randperm(n, generator=gen)
        correct = 0
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            x = _to_tensor(images[idx.numpy()])
            if config.augment:
                x = _augment_batch(x, gen)
            y = y_all[idx]
            opt.zero_grad()
            logits = net(x)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {i // config.batch_size}: {loss.item()}"
                )
            loss.backward()
            opt.step()
            correct += int((logits.argmax(1) == y).sum())
        if sched is not None:
            sched.step()
        last_acc = correct / n
    net.eval()
    return ClassifierModel(net=net, num_classes=dataset.num_classes,
                           train_accuracy=last_acc, seed=config.seed)
