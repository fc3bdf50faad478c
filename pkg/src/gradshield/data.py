"""Synthetic class-balanced image patterns in [0, 1]."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor


@dataclass(frozen=True)
class SyntheticDataset:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,) int
    seed: int
    classes: int

    def __len__(self):
        return len(self.labels)

    def onehot(self, labels=None) -> np.ndarray:
        labels = self.labels if labels is None else labels
        return np.eye(self.classes)[labels]

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx, dtype=int)
        return SyntheticDataset(self.images[idx], self.labels[idx], self.seed, self.classes)


def _pattern(k: int, classes: int, H: int, phase: float) -> np.ndarray:
    theta = np.pi * k / classes
    freq = 2 + (k % 3)
    v, u = np.mgrid[0:H, 0:H] / H
    a = 2 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) + phase
    if k % 2 == 0:
        return np.sin(a)
    b = 2 * np.pi * freq * (-u * np.sin(theta) + v * np.cos(theta)) + phase
    return np.sin(a) * np.sin(b) * 1.5


def gen_data(classes: int, per_class: int, H: int, seed: int, channels: int = 3,
             noise: float = 0.1) -> SyntheticDataset:
    """Oriented stripes (even classes) or checkers (odd classes) per class.

    Every sample gets a small random phase shift and contrast, then uniform
    noise of amplitude ``noise``, and is clipped to [0, 1].
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(n)]
    images = np.empty((n, channels, H, H))
    for s, k in enumerate(labels):
        phase = rng.uniform(-np.pi / 8, np.pi / 8)
        contrast = rng.uniform(0.3, 0.45)
        base = 0.5 + contrast * _pattern(int(k), classes, H, phase)
        images[s] = base[None] + rng.uniform(-noise, noise, size=(channels, H, H))
    np.clip(images, 0.0, 1.0, out=images)
    return SyntheticDataset(images, labels, seed, classes)


def nearest_centroid_accuracy(train: SyntheticDataset, test: SyntheticDataset) -> float:
    """Accuracy of a nearest-class-mean classifier; a separability check."""
    flat = train.images.reshape(len(train), -1)
    cents = np.stack([flat[train.labels == k].mean(axis=0) for k in range(train.classes)])
    q = test.images.reshape(len(test), -1)
    d = ((q[:, None, :] - cents[None]) ** 2).sum(axis=-1)
    return float(np.mean(d.argmin(axis=1) == test.labels))


def save_dataset(ds: SyntheticDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if len(ds):
        tensor.save(out / "images.pelt", ds.images)
    meta = {"labels": ds.labels.tolist(), "seed": ds.seed, "classes": ds.classes,
            "shape": list(ds.images.shape)}
    (out / "dataset.json").write_text(json.dumps(meta, indent=1) + "\n")


def load_dataset(out_dir) -> SyntheticDataset:
    out = Path(out_dir)
    meta = json.loads((out / "dataset.json").read_text())
    if meta["labels"]:
        images = np.array(tensor.load(out / "images.pelt"))
    else:
        images = np.zeros(meta["shape"])
    return SyntheticDataset(images, np.array(meta["labels"], dtype=int), meta["seed"], meta["classes"])
