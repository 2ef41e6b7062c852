"""Baseline-plus-block video classifier for the synthetic task.

Forward: standardise the clip, (spatially strided) stem convolution, rectifier, append
normalised (t, h, w) coordinate channels, optional block, global average
pool, linear classifier.

The coordinate channels pool to a constant, so they carry nothing for the
block-free baseline; the attention blocks need them because embedded
Gaussian affinities are otherwise blind to where a feature sits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import BEST_MASK_ROW, MaskSpec, ProjectionParams, nonlocal_backward, nonlocal_forward
from .pipeline import conv3d, conv3d_backward, inflate_kernel
from .relation import RelationNetParams, relation_backward, relation_forward

BLOCK_KINDS = ("none", "nonlocal", "mask_nonlocal", "relation")
_PROJ_KEYS = ("w_theta", "w_phi", "w_g", "w_z")
_REL_KEYS = ("layer1", "layer2", "w_g", "w_z")


@dataclass
class ToyModel:
    kind: str
    params: dict[str, np.ndarray]
    mask: MaskSpec = field(default_factory=MaskSpec.dense)
    receptive: tuple[int, int, int] = (1, 2, 2)
    output: tuple[int, int, int] = (0, 1, 1)
    normalize_relations: bool = True
    coord_channels: bool = True
    standardize: bool = True
    stem_stride: int = 1

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}; choose from {BLOCK_KINDS}")

    @property
    def num_classes(self) -> int:
        return self.params["classifier"].shape[0]

    @property
    def stem_channels(self) -> int:
        return self.params["stem"].shape[0]

    def projection_params(self) -> ProjectionParams:
        return ProjectionParams(*(self.params[k] for k in _PROJ_KEYS))

    def relation_params(self) -> RelationNetParams:
        p = self.params
        return RelationNetParams(
            self.receptive, self.output, p["layer1"], p["layer2"], p["w_g"], p["w_z"], self.normalize_relations
        )

    def copy(self) -> "ToyModel":
        return ToyModel(
            self.kind,
            {k: v.copy() for k, v in self.params.items()},
            self.mask,
            self.receptive,
            self.output,
            self.normalize_relations,
            self.coord_channels,
            self.standardize,
            self.stem_stride,
        )


def build_model(
    kind: str,
    num_classes: int = 8,
    stem_channels: int = 4,
    stem_kernel: int = 3,
    stem_time: int = 1,
    bottleneck: int | None = None,
    mask: MaskSpec | None = None,
    receptive: tuple[int, int, int] = (2, 2, 2),
    output: tuple[int, int, int] = (1, 1, 1),
    residual_init: str = "random",
    coord_channels: bool = True,
    stem_stride: int = 2,
    rng=None,
    dtype=np.float64,
) -> ToyModel:
    """Randomly initialised model.

    The stem is a 2D kernel bank inflated to ``stem_time`` frames and applied
    with spatial stride ``stem_stride``, which keeps dense attention over the
    default 8x16x16 clip at 512 positions.  With
    ``residual_init="zero"`` the block starts as the identity (``w_z`` and the
    relation output layer zeroed); ``"random"`` draws them like the other
    projections.  The classifier starts at zero.
    """
    rng = np.random.default_rng(rng)
    fan = stem_kernel * stem_kernel
    b = math.sqrt(6.0 / (fan + stem_channels * fan))
    k2 = rng.uniform(-b, b, size=(stem_channels, 1, stem_kernel, stem_kernel))
    params = {"stem": inflate_kernel(k2, stem_time).astype(dtype)}
    c_feat = stem_channels + (3 if coord_channels else 0)
    if mask is None:
        mask = BEST_MASK_ROW if kind == "mask_nonlocal" else MaskSpec.dense()
    if kind in ("nonlocal", "mask_nonlocal"):
        pp = ProjectionParams.init(c_feat, bottleneck, rng, dtype)
        if residual_init == "random":
            bz = math.sqrt(6.0 / sum(pp.w_z.shape))
            pp.w_z = rng.uniform(-bz, bz, size=pp.w_z.shape).astype(dtype)
        params.update(pp.arrays())
    elif kind == "relation":
        rp = RelationNetParams.init(c_feat, receptive, output, bottleneck, rng=rng, dtype=dtype)
        if residual_init == "random":
            for key in ("layer2", "w_z"):
                shape = getattr(rp, key).shape
                bz = math.sqrt(6.0 / sum(shape))
                setattr(rp, key, rng.uniform(-bz, bz, size=shape).astype(dtype))
        params.update(rp.arrays())
    params["classifier"] = np.zeros((num_classes, c_feat), dtype=dtype)
    params["bias"] = np.zeros(num_classes, dtype=dtype)
    return ToyModel(kind, params, mask, receptive, output, True, coord_channels, True, stem_stride)


def coordinate_channels(dims: tuple[int, int, int], dtype=np.float64) -> np.ndarray:
    """(T, H, W, 3) map of coordinates scaled to [-1, 1] (0 on length-1 axes)."""
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in dims]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack(grid, axis=-1).astype(dtype)


def standardize_clip(video: np.ndarray) -> np.ndarray:
    std = video.std()
    return (video - video.mean()) / (std if std > 0 else 1.0)


@dataclass
class ForwardCache:
    stem_in: np.ndarray
    stem_pre: np.ndarray
    block_cache: object
    pooled: np.ndarray
    dims: tuple[int, int, int]


def features(model: ToyModel, video: np.ndarray):
    """Stem, rectifier and coordinate channels; returns ``(x, stem_in, stem_pre)``."""
    if video.ndim != 4 or video.shape[-1] != 1:
        raise ValueError(f"expected a (T, H, W, 1) clip, got {video.shape}")
    dtype = model.params["stem"].dtype
    v = video.astype(dtype, copy=False)
    if model.standardize:
        v = standardize_clip(v)
    stem_in = v.transpose(3, 0, 1, 2)
    pre = conv3d(stem_in, model.params["stem"], "same")
    s = model.stem_stride
    if s > 1:
        pre = pre[:, :, ::s, ::s]
    x = np.maximum(pre, 0.0).transpose(1, 2, 3, 0)
    if model.coord_channels:
        x = np.concatenate([x, coordinate_channels(x.shape[:3], dtype)], axis=-1)
    return x, stem_in, pre


def _block_forward(model: ToyModel, x: np.ndarray):
    if model.kind == "none":
        return x, None
    if model.kind == "relation":
        out = relation_forward(x, model.relation_params())
        return out.z, out.cache
    out = nonlocal_forward(x, model.projection_params(), model.mask)
    return out.z, out.cache


def model_forward(model: ToyModel, video: np.ndarray, keep_cache: bool = False):
    """Class logits for one ``(T, H, W, 1)`` clip."""
    x, stem_in, pre = features(model, video)
    z, block_cache = _block_forward(model, x)
    pooled = z.reshape(-1, z.shape[-1]).mean(axis=0)
    if pooled.shape[0] != model.params["classifier"].shape[1]:
        raise ValueError(f"classifier expects {model.params['classifier'].shape[1]} features, got {pooled.shape[0]}")
    logits = model.params["classifier"] @ pooled + model.params["bias"]
    if keep_cache:
        return logits, ForwardCache(stem_in, pre, block_cache, pooled, x.shape[:3])
    return logits


def model_backward(model: ToyModel, cache: ForwardCache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    grads = {"classifier": np.outer(dlogits, cache.pooled), "bias": dlogits.copy()}
    T, H, W = cache.dims
    dpooled = p["classifier"].T @ dlogits
    dz = np.broadcast_to(dpooled / (T * H * W), (T, H, W, dpooled.shape[0])).copy()
    if model.kind == "none":
        dx = dz
    elif model.kind == "relation":
        dx, g = relation_backward(dz, cache.block_cache)
        grads.update(g.arrays())
    else:
        dx, g = nonlocal_backward(dz, cache.block_cache)
        grads.update(g.arrays())
    dstem_out = dx[..., : model.stem_channels].transpose(3, 0, 1, 2) * (cache.stem_pre > 0)
    s = model.stem_stride
    if s > 1:
        full = np.zeros((dstem_out.shape[0],) + cache.stem_in.shape[1:], dstem_out.dtype)
        full[:, :, ::s, ::s] = dstem_out
        dstem_out = full
    _, grads["stem"] = conv3d_backward(dstem_out, cache.stem_in, p["stem"], "same")
    return grads
