"""Video plumbing around the attention blocks.

Kernel inflation and 3D convolution, frame samplers, clip-score
aggregation, late fusion of per-model score tables and top-k metrics.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ChannelMismatchError, softmax_rows

CLIP_WINDOW = 64
CLIP_STRIDE = 2


# ---------------------------------------------------------------------------
# kernels and convolution
# ---------------------------------------------------------------------------


def inflate_kernel(k2: np.ndarray, t: int) -> np.ndarray:
    """Turn a ``(C_out, C_in, k, k)`` kernel into ``(C_out, C_in, t, k, k)``.

    Every temporal plane is the 2D kernel divided by ``t``, so a temporally
    constant input gives the same response as the 2D kernel on one frame.
    """
    if k2.ndim != 4 or k2.shape[2] != k2.shape[3]:
        raise ValueError(f"expected a square (C_out, C_in, k, k) kernel, got {k2.shape}")
    if t < 1:
        raise ValueError(f"temporal extent must be >= 1, got {t}")
    planes = k2 / k2.dtype.type(t)
    return np.repeat(planes[:, :, None], t, axis=2)


def same_padding(kernel: np.ndarray) -> tuple[int, int, int]:
    kt, kh, kw = kernel.shape[2:]
    if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"'same' padding needs odd kernel extents, got {(kt, kh, kw)}")
    return (kt - 1) // 2, (kh - 1) // 2, (kw - 1) // 2


def _resolve_pad(kernel, pad):
    if isinstance(pad, str):
        if pad != "same":
            raise ValueError(f"unknown padding mode {pad!r}")
        return same_padding(kernel)
    if isinstance(pad, int):
        return (pad, pad, pad)
    return tuple(int(p) for p in pad)


def conv3d(x: np.ndarray, kernel: np.ndarray, pad="same") -> np.ndarray:
    """Stride-1 cross-correlation of a channels-first video ``(C, T, H, W)``.

    ``pad`` is ``"same"``, an int, or per-axis ``(pt, ph, pw)`` zero padding.
    """
    if x.ndim != 4 or kernel.ndim != 5:
        raise ValueError(f"expected x (C, T, H, W) and kernel (C_out, C_in, t, k, k), got {x.shape}, {kernel.shape}")
    if kernel.shape[1] != x.shape[0]:
        raise ChannelMismatchError(f"kernel takes {kernel.shape[1]} channels, input has {x.shape[0]}")
    pt, ph, pw = _resolve_pad(kernel, pad)
    xp = np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, kernel.shape[2:], axis=(1, 2, 3))
    if min(win.shape[1:4]) < 1:
        raise ValueError("kernel larger than padded input")
    # win: (C_in, To, Ho, Wo, kt, kh, kw)
    out = np.tensordot(kernel, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    return out


def conv3d_backward(out_grad: np.ndarray, x: np.ndarray, kernel: np.ndarray, pad="same"):
    """Return ``(x_grad, kernel_grad)`` for :func:`conv3d`."""
    pt, ph, pw = _resolve_pad(kernel, pad)
    xp = np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, kernel.shape[2:], axis=(1, 2, 3))
    k_grad = np.tensordot(out_grad, win, axes=([1, 2, 3], [1, 2, 3]))
    dxp = np.zeros_like(xp)
    _, To, Ho, Wo = out_grad.shape
    kt, kh, kw = kernel.shape[2:]
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                dxp[:, a : a + To, b : b + Ho, c : c + Wo] += np.tensordot(
                    kernel[:, :, a, b, c], out_grad, axes=([0], [0])
                )
    T, H, W = x.shape[1:]
    return dxp[:, pt : pt + T, ph : ph + H, pw : pw + W], k_grad


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


def sample_consecutive(
    video_len: int,
    start: int | str = "center",
    rng_seed=None,
    window: int = CLIP_WINDOW,
    stride: int = CLIP_STRIDE,
) -> list[int]:
    """Pick a ``window``-frame run and keep every ``stride``-th frame.

    ``start`` is an explicit index, ``"random"`` (training) or ``"center"``
    (evaluation).  Videos shorter than the window repeat their last frame.
    """
    if video_len < 1:
        raise ValueError("video has no frames")
    latest = max(0, video_len - window)
    if start == "random":
        s = int(np.random.default_rng(rng_seed).integers(0, latest + 1))
    elif start == "center":
        s = latest // 2
    else:
        s = int(start)
        if not 0 <= s < video_len:
            raise ValueError(f"start {s} outside video of {video_len} frames")
    return [min(s + k, video_len - 1) for k in range(0, window, stride)]


def tsn_segments(video_len: int, k_segments: int) -> list[tuple[int, int]]:
    """Split ``[0, video_len)`` into ``k`` near-equal runs, longer ones first."""
    base, rem = divmod(video_len, k_segments)
    bounds, s = [], 0
    for i in range(k_segments):
        e = s + base + (1 if i < rem else 0)
        bounds.append((s, e))
        s = e
    return bounds


def tsn_segment_indices(video_len: int, k_segments: int, mode: str = "eval", rng_seed=None) -> list[int]:
    """One frame per segment: the centre in eval mode, uniform in train mode.

    When there are more segments than frames, empty segments fall back to
    the last frame.
    """
    if video_len < 1 or k_segments < 1:
        raise ValueError("need video_len >= 1 and k_segments >= 1")
    mode = mode.lower()
    rng = np.random.default_rng(rng_seed)
    out = []
    for s, e in tsn_segments(video_len, k_segments):
        if e <= s:
            out.append(min(s, video_len - 1))
        elif mode == "eval":
            out.append((s + e - 1) // 2)
        elif mode == "train":
            out.append(int(rng.integers(s, e)))
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return out


def aggregate_clip_scores(clip_logits: Sequence[np.ndarray]) -> np.ndarray:
    """Video-level prediction: mean of the per-clip softmax scores."""
    if len(clip_logits) == 0:
        raise ValueError("no clips to aggregate")
    stacked = np.stack([np.asarray(c, dtype=np.float64) for c in clip_logits])
    if stacked.ndim != 2:
        raise ValueError("every clip must be a 1-D logit vector of the same length")
    return softmax_rows(stacked).mean(axis=0)


# ---------------------------------------------------------------------------
# score tables
# ---------------------------------------------------------------------------


class ScoreTableError(ValueError):
    pass


class IdMismatchError(ScoreTableError):
    pass


@dataclass
class ScoreTable:
    ids: list[str]
    scores: np.ndarray  # (V, C_cls)
    labels: list[int] | None = field(default=None)

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] != len(self.ids):
            raise ScoreTableError(f"scores {self.scores.shape} do not align with {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            raise ScoreTableError("duplicate video ids")
        if self.labels is not None:
            self.labels = [int(v) for v in self.labels]
            if len(self.labels) != len(self.ids):
                raise ScoreTableError("labels do not align with ids")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def has_labels(self) -> bool:
        return self.labels is not None and any(v >= 0 for v in self.labels)

    def row(self, video_id: str) -> np.ndarray:
        return self.scores[self.ids.index(video_id)]


def write_score_csv(table: ScoreTable, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(format_score_csv(table))


def format_score_csv(table: ScoreTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label"] + [f"c{j}" for j in range(table.num_classes)])
    labels = table.labels or [-1] * len(table.ids)
    for vid, lab, row in zip(table.ids, labels, table.scores):
        w.writerow([vid, lab] + [f"{v:.9g}" for v in row])
    return buf.getvalue()


def read_score_csv(path: str | os.PathLike) -> ScoreTable:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ScoreTableError(f"{path}: empty file")
    header = rows[0]
    n_cls = len(header) - 2
    if header[:2] != ["id", "label"] or n_cls < 1 or header[2:] != [f"c{j}" for j in range(n_cls)]:
        raise ScoreTableError(f"{path}: bad header {header}")
    ids, labels, scores = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != n_cls + 2:
            raise ScoreTableError(f"{path}:{lineno}: expected {n_cls + 2} fields, got {len(row)}")
        try:
            labels.append(int(row[1]))
            scores.append([float(v) for v in row[2:]])
        except ValueError as e:
            raise ScoreTableError(f"{path}:{lineno}: {e}") from None
        ids.append(row[0])
    arr = np.array(scores, dtype=np.float64).reshape(len(ids), n_cls)
    return ScoreTable(ids, arr, labels)


def read_labels_csv(path: str | os.PathLike) -> dict[str, int]:
    """``id,label`` file -> mapping."""
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[:2] != ["id", "label"]:
            raise ScoreTableError(f"{path}: expected header 'id,label'")
        return {row[0]: int(row[1]) for row in reader if row}


def fuse_scores(tables: Sequence[ScoreTable], weights: Sequence[float] | None = None) -> ScoreTable:
    """Weighted average of probability tables, rows matched by video id.

    The output follows the id order of the first table.  Weights default to
    uniform and are normalised to sum to one.
    """
    if not tables:
        raise ScoreTableError("nothing to fuse")
    weights = [1.0] * len(tables) if weights is None else [float(w) for w in weights]
    if len(weights) != len(tables):
        raise ScoreTableError(f"{len(weights)} weights for {len(tables)} tables")
    if any(w < 0 for w in weights):
        raise ScoreTableError("weights must be non-negative")
    total = sum(weights)
    if total <= 0:
        raise ScoreTableError("weights sum to zero")
    ref = tables[0]
    ref_ids = set(ref.ids)
    fused = np.zeros_like(ref.scores)
    for m, (tab, w) in enumerate(zip(tables, weights)):
        if tab.num_classes != ref.num_classes:
            raise ScoreTableError(f"table {m} has {tab.num_classes} classes, table 0 has {ref.num_classes}")
        for vid in ref.ids:
            if vid not in tab.ids:
                raise IdMismatchError(f"id {vid!r} missing from table {m}")
        for vid in tab.ids:
            if vid not in ref_ids:
                raise IdMismatchError(f"id {vid!r} missing from table 0")
        pos = {vid: i for i, vid in enumerate(tab.ids)}
        order = [pos[vid] for vid in ref.ids]
        fused += (w / total) * tab.scores[order]
    return ScoreTable(list(ref.ids), fused, _merged_labels(tables, ref.ids))


def _merged_labels(tables: Sequence[ScoreTable], ids: list[str]) -> list[int] | None:
    for t in tables:
        if t.has_labels():
            pos = {vid: lab for vid, lab in zip(t.ids, t.labels)}
            return [pos[vid] for vid in ids]
    return None


def topk_accuracy(table: ScoreTable, k: int) -> float:
    """Fraction of rows whose label is among the ``k`` best classes.

    Equal scores rank the lower class index first.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if table.labels is None:
        raise ScoreTableError("table has no labels")
    labels = np.asarray(table.labels)
    if np.any(labels < 0) or np.any(labels >= table.num_classes):
        raise ScoreTableError("label out of range")
    order = np.argsort(-table.scores, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == labels[:, None], axis=1)))
