"""Relation-vector aggregation.

A small per-position network looks at the zero-padded receptive patch of
size ``(2t0+1)(2h0+1)(2w0+1)`` around each position and emits a relation
vector ``r`` with one weight per offset in the output window
``(2t1+1)(2h1+1)(2w1+1)``.  The block output is

    y_i = sum_j r_i[j] g(x_{i+j}),    z_i = w_z y_i + x_i

where out-of-range neighbours contribute zero.  Offsets are enumerated
row-major over (dt, dh, dw), each running from -radius to +radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .attention import StaleCacheError
from .tensor import ChannelMismatchError, check_feature_map, softmax_rows, softmax_rows_backward

Radii = tuple[int, int, int]


class RadiiConstraintError(ValueError):
    pass


def window_size(radii: Radii) -> int:
    return math.prod(2 * r + 1 for r in radii)


def window_offsets(radii: Radii) -> np.ndarray:
    """(K, 3) offsets in row-major order."""
    axes = [np.arange(-r, r + 1) for r in radii]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in grid], axis=1)


def gather_windows(x: np.ndarray, radii: Radii) -> np.ndarray:
    """Zero-padded neighbourhoods, shape ``(N, K, C)``."""
    T, H, W, C = x.shape
    rt, rh, rw = radii
    xp = np.pad(x, ((rt, rt), (rh, rh), (rw, rw), (0, 0)))
    win = sliding_window_view(xp, (2 * rt + 1, 2 * rh + 1, 2 * rw + 1), axis=(0, 1, 2))
    # (T, H, W, C, kt, kh, kw) -> (T, H, W, kt, kh, kw, C)
    return win.transpose(0, 1, 2, 4, 5, 6, 3).reshape(T * H * W, window_size(radii), C)


def scatter_windows(dwin: np.ndarray, dims: tuple[int, int, int], radii: Radii) -> np.ndarray:
    """Adjoint of :func:`gather_windows`."""
    T, H, W = dims
    C = dwin.shape[-1]
    rt, rh, rw = radii
    dwin = dwin.reshape(T, H, W, -1, C)
    out = np.zeros((T + 2 * rt, H + 2 * rh, W + 2 * rw, C), dtype=dwin.dtype)
    for k, (a, b, c) in enumerate(window_offsets(radii) + np.array(radii)):
        out[a : a + T, b : b + H, c : c + W] += dwin[:, :, :, k]
    return out[rt : rt + T, rh : rh + H, rw : rw + W]


@dataclass
class RelationNetParams:
    receptive: Radii
    output: Radii
    layer1: np.ndarray  # (C_mid, P * C)
    layer2: np.ndarray  # (K, C_mid)
    w_g: np.ndarray  # (C', C)
    w_z: np.ndarray  # (C, C')
    normalize_relations: bool = True

    def __post_init__(self):
        self.receptive = tuple(int(r) for r in self.receptive)
        self.output = tuple(int(r) for r in self.output)
        cb, c = self.w_g.shape
        k = window_size(self.output)
        if self.layer1.shape[1] != window_size(self.receptive) * c:
            raise ChannelMismatchError(
                f"layer1 expects {self.layer1.shape[1]} inputs, patch gives {window_size(self.receptive) * c}"
            )
        if self.layer2.shape != (k, self.layer1.shape[0]):
            raise ChannelMismatchError(f"layer2 shape {self.layer2.shape}, expected {(k, self.layer1.shape[0])}")
        if self.w_z.shape != (c, cb):
            raise ChannelMismatchError(f"w_z shape {self.w_z.shape}, expected {(c, cb)}")

    @property
    def channels(self) -> int:
        return self.w_g.shape[1]

    @property
    def num_relations(self) -> int:
        return window_size(self.output)

    @classmethod
    def init(
        cls,
        channels: int,
        receptive: Radii = (2, 2, 2),
        output: Radii = (1, 1, 1),
        bottleneck: int | None = None,
        hidden: int | None = None,
        rng=None,
        normalize_relations: bool = True,
        dtype=np.float64,
    ) -> "RelationNetParams":
        rng = np.random.default_rng(rng)
        cb = bottleneck or max(1, channels // 2)
        k = window_size(output)
        c_mid = hidden or 2 * k
        fan_in = window_size(receptive) * channels

        def u(rows, cols):
            b = math.sqrt(6.0 / (rows + cols))
            return rng.uniform(-b, b, size=(rows, cols)).astype(dtype)

        return cls(
            receptive,
            output,
            u(c_mid, fan_in),
            np.zeros((k, c_mid), dtype=dtype),
            u(cb, channels),
            np.zeros((channels, cb), dtype=dtype),
            normalize_relations,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {"layer1": self.layer1, "layer2": self.layer2, "w_g": self.w_g, "w_z": self.w_z}

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "RelationNetParams":
        return replace(self, **arrays)


def check_radii(params: RelationNetParams, dims: tuple[int, int, int]) -> None:
    """Require ``r1 < r0 < extent / 2`` on every axis."""
    for axis, r0, r1, n in zip("thw", params.receptive, params.output, dims):
        if not (r1 < r0 and 2 * r0 < n):
            raise RadiiConstraintError(
                f"axis {axis}: need {axis}1 < {axis}0 < extent/2, got {axis}1={r1}, {axis}0={r0}, extent={n}"
            )


@dataclass
class RelationField:
    r: np.ndarray  # (T, H, W, K)


@dataclass
class _NetCache:
    patches: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    r: np.ndarray


def _net_forward(x: np.ndarray, params: RelationNetParams) -> _NetCache:
    patches = gather_windows(x, params.receptive).reshape(x.shape[0] * x.shape[1] * x.shape[2], -1)
    pre = patches @ params.layer1.T
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ params.layer2.T
    r = softmax_rows(logits) if params.normalize_relations else logits
    return _NetCache(patches, pre, hidden, r)


def compute_relation_vectors(x: np.ndarray, params: RelationNetParams) -> RelationField:
    check_feature_map(x)
    if x.shape[-1] != params.channels:
        raise ChannelMismatchError(f"input has {x.shape[-1]} channels, params expect {params.channels}")
    check_radii(params, x.shape[:3])
    nc = _net_forward(x, params)
    return RelationField(nc.r.reshape(x.shape[:3] + (-1,)))


def _aggregate(x: np.ndarray, r: np.ndarray, params: RelationNetParams):
    n = r.shape[0]
    g = x.reshape(n, -1) @ params.w_g.T
    g_win = gather_windows(g.reshape(x.shape[:3] + (-1,)), params.output)
    y = np.einsum("nk,nkc->nc", r, g_win)
    z = y @ params.w_z.T + x.reshape(n, -1)
    return g_win, y, z.reshape(x.shape)


def relation_aggregate(x: np.ndarray, field: RelationField, params: RelationNetParams) -> np.ndarray:
    """Residual output ``z = w_z y + x`` for a given relation field."""
    check_feature_map(x)
    if field.r.shape != x.shape[:3] + (params.num_relations,):
        raise ValueError(f"relation field {field.r.shape} does not match {x.shape[:3]} x K={params.num_relations}")
    if x.shape[-1] != params.channels:
        raise ChannelMismatchError(f"input has {x.shape[-1]} channels, params expect {params.channels}")
    return _aggregate(x, field.r.reshape(-1, params.num_relations), params)[2]


@dataclass
class RelationCache:
    x: np.ndarray
    net: _NetCache
    g_win: np.ndarray
    y: np.ndarray
    params: RelationNetParams
    consumed: bool = field(default=False, repr=False)


@dataclass
class RelationOutput:
    z: np.ndarray
    field: RelationField
    cache: RelationCache


def relation_forward(x: np.ndarray, params: RelationNetParams) -> RelationOutput:
    check_feature_map(x)
    if x.shape[-1] != params.channels:
        raise ChannelMismatchError(f"input has {x.shape[-1]} channels, params expect {params.channels}")
    check_radii(params, x.shape[:3])
    nc = _net_forward(x, params)
    g_win, y, z = _aggregate(x, nc.r, params)
    return RelationOutput(z, RelationField(nc.r.reshape(x.shape[:3] + (-1,))), RelationCache(x, nc, g_win, y, params))


def relation_backward(
    out_grad: np.ndarray, cache: RelationCache, detach_relations: bool = False
) -> tuple[np.ndarray, RelationNetParams]:
    """Gradients w.r.t. the input and every weight matrix.

    With ``detach_relations`` the relation field is treated as a constant:
    no gradient flows through the patch network and its weight gradients
    are zero.
    """
    if cache.consumed:
        raise StaleCacheError("cache already consumed by a backward call")
    x, p = cache.x, cache.params
    if out_grad.shape != x.shape:
        raise StaleCacheError(f"out_grad {out_grad.shape} does not match cached forward {x.shape}")
    cache.consumed = True
    dims = x.shape[:3]
    n, C = x.shape[0] * x.shape[1] * x.shape[2], x.shape[3]
    dz = out_grad.reshape(n, C)
    xf = x.reshape(n, C)
    r = cache.net.r

    dw_z = dz.T @ cache.y
    dy = dz @ p.w_z
    dg_win = r[:, :, None] * dy[:, None, :]
    dg = scatter_windows(dg_win, dims, p.output).reshape(n, -1)
    dw_g = dg.T @ xf
    dx = dz + dg @ p.w_g

    if detach_relations:
        d_layer1 = np.zeros_like(p.layer1)
        d_layer2 = np.zeros_like(p.layer2)
    else:
        dr = np.einsum("nc,nkc->nk", dy, cache.g_win)
        dlogits = softmax_rows_backward(r, dr) if p.normalize_relations else dr
        d_layer2 = dlogits.T @ cache.net.hidden
        dpre = (dlogits @ p.layer2) * (cache.net.pre > 0)
        d_layer1 = dpre.T @ cache.net.patches
        dpatch = (dpre @ p.layer1).reshape(n, window_size(p.receptive), C)
        dx = dx + scatter_windows(dpatch, dims, p.receptive).reshape(n, C)

    grads = replace(p, layer1=d_layer1, layer2=d_layer2, w_g=dw_g, w_z=dw_z)
    return dx.reshape(x.shape), grads


def init_from_mask(radii: Radii, params: RelationNetParams) -> RelationNetParams:
    """Start the block as a uniform local kernel over ``radii`` with no residual.

    ``layer2`` and ``w_z`` are zeroed, so the block is the identity and every
    relation vector (after softmax) is uniform over the window.
    """
    radii = tuple(int(r) for r in radii)
    if radii != params.output:
        raise ValueError(f"mask radii {radii} differ from relation output radii {params.output}")
    return replace(
        params,
        layer2=np.zeros_like(params.layer2),
        w_z=np.zeros_like(params.w_z),
        normalize_relations=True,
    )
