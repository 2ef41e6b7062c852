"""Moving-square clips for a desk-scale direction classification task.

Each clip is a bright square drifting in one compass direction over
uniform noise.  A single frame shows only a square somewhere, so the label
lives in the frame order.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import read_tensor, write_tensor

# (dh, dw) per class; h grows downwards.
DIRECTIONS_8 = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))
DIRECTION_NAMES_8 = ("E", "NE", "N", "NW", "W", "SW", "S", "SE")
DIRECTIONS_4 = ((0, 1), (-1, 0), (0, -1), (1, 0))
DIRECTION_NAMES_4 = ("E", "N", "W", "S")


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 8
    T: int = 8
    H: int = 16
    W: int = 16
    object_size: int = 4
    speed: int = 1
    noise: float = 0.1
    n_train: int = 500
    n_test: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes not in (4, 8):
            raise SynthConfigError(f"num_classes must be 4 or 8, got {self.num_classes}")
        if self.speed < 1:
            raise SynthConfigError("speed must be >= 1; a static square carries no direction")
        if min(self.T, self.H, self.W, self.object_size) < 1:
            raise SynthConfigError("extents and object size must be positive")
        if self.T < 2:
            raise SynthConfigError("need at least two frames to show motion")
        span = self.object_size + self.speed * (self.T - 1)
        if span > min(self.H, self.W):
            raise SynthConfigError(
                f"square of size {self.object_size} moving {self.speed} px/frame for {self.T} frames "
                f"needs {span} px but the frame is {self.H}x{self.W}"
            )
        if self.noise < 0:
            raise SynthConfigError("noise amplitude must be non-negative")

    @property
    def directions(self) -> tuple[tuple[int, int], ...]:
        return DIRECTIONS_8 if self.num_classes == 8 else DIRECTIONS_4


@dataclass
class Dataset:
    videos: np.ndarray  # (n, T, H, W, 1)
    labels: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.labels)


def _start(rng, d: int, extent: int, size: int, travel: int) -> int:
    lo = travel if d < 0 else 0
    hi = extent - size - (travel if d > 0 else 0)
    return int(rng.integers(lo, hi + 1))


def render_clip(cfg: SynthConfig, label: int, rng: np.random.Generator) -> np.ndarray:
    dh, dw = cfg.directions[label]
    travel = cfg.speed * (cfg.T - 1)
    h0 = _start(rng, dh, cfg.H, cfg.object_size, travel)
    w0 = _start(rng, dw, cfg.W, cfg.object_size, travel)
    video = rng.uniform(-cfg.noise, cfg.noise, size=(cfg.T, cfg.H, cfg.W))
    s = cfg.object_size
    for t in range(cfg.T):
        h = h0 + dh * cfg.speed * t
        w = w0 + dw * cfg.speed * t
        video[t, h : h + s, w : w + s] += 1.0
    return video[..., None]


def _make_split(cfg: SynthConfig, n: int, seed_seq: np.random.SeedSequence) -> Dataset:
    rng = np.random.default_rng(seed_seq)
    labels = rng.integers(0, cfg.num_classes, size=n)
    videos = np.stack([render_clip(cfg, int(c), rng) for c in labels]) if n else np.zeros((0, cfg.T, cfg.H, cfg.W, 1))
    return Dataset(videos.astype(np.float64), labels.astype(np.int64))


def generate_synthetic(cfg: SynthConfig) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) split for ``cfg.seed``."""
    cfg.validate()
    train_seq, test_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    return _make_split(cfg, cfg.n_train, train_seq), _make_split(cfg, cfg.n_test, test_seq)


def direction_oracle(video: np.ndarray, directions=DIRECTIONS_8) -> int:
    """Scripted classifier: centroid displacement from the first to the last frame."""
    v = video[..., 0] if video.ndim == 4 else video
    T, H, W = v.shape
    hh, ww = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")

    def centroid(frame):
        m = frame > 0.5
        return np.array([hh[m].mean(), ww[m].mean()])

    d = centroid(v[-1]) - centroid(v[0])
    return int(np.argmax([np.dot(d, u) / np.hypot(*u) for u in directions]))


def write_dataset(ds: Dataset, directory: str | os.PathLike, prefix: str = "clip") -> None:
    """One NLT1 file per clip plus ``labels.csv`` (``id,label``)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "labels.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "label"])
        for i, (video, label) in enumerate(zip(ds.videos, ds.labels)):
            vid = f"{prefix}{i:05d}"
            write_tensor(np.ascontiguousarray(video), d / f"{vid}.nlt")
            w.writerow([vid, int(label)])


def read_dataset(directory: str | os.PathLike) -> Dataset:
    d = Path(directory)
    with open(d / "labels.csv", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        next(reader)
        rows = [r for r in reader if r]
    videos = np.stack([read_tensor(d / f"{vid}.nlt") for vid, _ in rows])
    labels = np.array([int(lab) for _, lab in rows], dtype=np.int64)
    return Dataset(videos, labels)
