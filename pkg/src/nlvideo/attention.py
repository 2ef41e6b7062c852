"""Non-local and mask non-local attention over video feature maps.

The affinity is the embedded Gaussian ``exp(theta(x_i) . phi(x_j))``
normalised per query position.  For the masked variant the normalisation
runs over the query's neighbourhood only; entries outside it are exactly
zero.  Every block is residual: ``z = w_z y + x``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Union

import numpy as np

from .tensor import ChannelMismatchError, check_feature_map, position_coords

INF = math.inf
Radius = Union[int, Fraction, float]

# Dense N x N attention above this many positions needs the tiled paths.
MAX_DENSE_POSITIONS = 4096
# Above this bottleneck width the explicit softmax Jacobian is cheaper.
_LOWRANK_MAX_CB = 8


def parse_radius(text: str) -> Radius:
    """Parse ``inf``, an absolute integer, or a fraction ``num/den`` of the extent."""
    s = str(text).strip().lower()
    if s in ("inf", "+inf", "infinity"):
        return INF
    if "/" in s:
        num, den = s.split("/", 1)
        frac = Fraction(int(num), int(den))
        if frac < 0:
            raise ValueError(f"negative radius {text!r}")
        return frac
    val = int(s)
    if val < 0:
        raise ValueError(f"negative radius {text!r}")
    return val


def format_radius(r: Radius) -> str:
    if r == INF:
        return "inf"
    if isinstance(r, Fraction):
        return f"{r.numerator}/{r.denominator}"
    return str(int(r))


def resolve_radius(r: Radius, extent: int) -> int | None:
    """Absolute radius for one axis, or None when unrestricted.

    Fractions resolve as ``floor(fraction * extent)``.
    """
    if r == INF:
        return None
    if isinstance(r, Fraction):
        return math.floor(r * extent)
    return int(r)


@dataclass(frozen=True)
class MaskSpec:
    delta_t: Radius = INF
    delta_h: Radius = INF
    delta_w: Radius = INF

    @classmethod
    def parse(cls, t: str, h: str, w: str) -> "MaskSpec":
        return cls(parse_radius(t), parse_radius(h), parse_radius(w))

    @classmethod
    def dense(cls) -> "MaskSpec":
        return cls()

    def resolve(self, dims: tuple[int, int, int]) -> tuple[int | None, int | None, int | None]:
        T, H, W = dims
        return (
            resolve_radius(self.delta_t, T),
            resolve_radius(self.delta_h, H),
            resolve_radius(self.delta_w, W),
        )

    def is_dense(self, dims: tuple[int, int, int]) -> bool:
        """True when the neighbourhood covers every position for these dims."""
        return all(r is None or r >= n - 1 for r, n in zip(self.resolve(dims), dims))

    def label(self) -> str:
        return "({},{},{})".format(*(format_radius(r) for r in (self.delta_t, self.delta_h, self.delta_w)))


# Neighbourhood settings in the benchmark grid; the first row is plain non-local.
BENCH_ROWS: tuple[MaskSpec, ...] = (
    MaskSpec(INF, INF, INF),
    MaskSpec(INF, Fraction(3, 7), Fraction(3, 7)),
    MaskSpec(INF, Fraction(3, 28), Fraction(3, 28)),
    MaskSpec(Fraction(1, 2), Fraction(3, 7), Fraction(3, 7)),
    MaskSpec(Fraction(1, 2), Fraction(3, 28), Fraction(3, 28)),
)
BEST_MASK_ROW = BENCH_ROWS[3]


def mask_indicator(i, j, spec: MaskSpec, dims: tuple[int, int, int]) -> int:
    """1 if position ``j`` lies in the neighbourhood of ``i`` (zero-based (t, h, w))."""
    for a, b, r in zip(i, j, spec.resolve(dims)):
        if r is not None and abs(a - b) > r:
            return 0
    return 1


@functools.lru_cache(maxsize=16)
def neighborhood_mask(spec: MaskSpec, dims: tuple[int, int, int]) -> np.ndarray:
    """Boolean (N, N) matrix, ``mask[p, q]`` iff q is in the neighbourhood of p.

    Results are cached and returned read-only.
    """
    coords = position_coords(dims)
    n = len(coords)
    mask = np.ones((n, n), dtype=bool)
    for axis, r in enumerate(spec.resolve(dims)):
        if r is not None:
            c = coords[:, axis]
            mask &= np.abs(c[:, None] - c[None, :]) <= r
    mask.flags.writeable = False
    return mask


def _axis_window_lengths(extent: int, r: int | None) -> np.ndarray:
    x = np.arange(extent)
    if r is None:
        return np.full(extent, extent)
    return np.minimum(extent - 1, x + r) - np.maximum(0, x - r) + 1


def neighborhood_sizes(spec: MaskSpec, dims: tuple[int, int, int]) -> np.ndarray:
    """|D_p| for every position, flat order."""
    lt, lh, lw = (_axis_window_lengths(n, r) for n, r in zip(dims, spec.resolve(dims)))
    return (lt[:, None, None] * lh[None, :, None] * lw[None, None, :]).ravel()


def pairwise_scores(theta_x: np.ndarray, phi_x: np.ndarray) -> np.ndarray:
    """Logits ``S[p, q] = theta(x)_p . phi(x)_q`` in flat position order."""
    check_feature_map(theta_x)
    check_feature_map(phi_x)
    if theta_x.shape != phi_x.shape:
        raise ValueError(f"shape mismatch {theta_x.shape} vs {phi_x.shape}")
    cb = theta_x.shape[-1]
    return theta_x.reshape(-1, cb) @ phi_x.reshape(-1, cb).T


def _masked_softmax(scores: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    s = scores if mask is None else np.where(mask, scores, -np.inf)
    a = s - s.max(axis=1, keepdims=True)
    np.exp(a, out=a)
    a /= a.sum(axis=1, keepdims=True)
    return a


def masked_softmax(scores: np.ndarray, spec: MaskSpec, dims: tuple[int, int, int]) -> np.ndarray:
    n = dims[0] * dims[1] * dims[2]
    if scores.shape != (n, n):
        raise ValueError(f"scores {scores.shape} do not match {n} positions")
    mask = None if spec.is_dense(dims) else neighborhood_mask(spec, dims)
    return _masked_softmax(scores, mask)


@dataclass
class ProjectionParams:
    w_theta: np.ndarray
    w_phi: np.ndarray
    w_g: np.ndarray
    w_z: np.ndarray

    def __post_init__(self):
        cb, c = self.w_theta.shape
        for name in ("w_phi", "w_g"):
            if getattr(self, name).shape != (cb, c):
                raise ChannelMismatchError(f"{name} has shape {getattr(self, name).shape}, expected {(cb, c)}")
        if self.w_z.shape != (c, cb):
            raise ChannelMismatchError(f"w_z has shape {self.w_z.shape}, expected {(c, cb)}")

    @property
    def channels(self) -> int:
        return self.w_theta.shape[1]

    @property
    def bottleneck(self) -> int:
        return self.w_theta.shape[0]

    @classmethod
    def init(cls, channels: int, bottleneck: int | None = None, rng=None, dtype=np.float64) -> "ProjectionParams":
        """Fan-based uniform init for the embeddings, zeros for ``w_z``."""
        rng = np.random.default_rng(rng)
        cb = bottleneck or max(1, channels // 2)
        bound = math.sqrt(6.0 / (channels + cb))

        def u():
            return rng.uniform(-bound, bound, size=(cb, channels)).astype(dtype)

        return cls(u(), u(), u(), np.zeros((channels, cb), dtype=dtype))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w_theta": self.w_theta, "w_phi": self.w_phi, "w_g": self.w_g, "w_z": self.w_z}


@dataclass
class NonlocalCache:
    x: np.ndarray  # (N, C)
    theta: np.ndarray
    phi: np.ndarray
    g: np.ndarray
    attn: np.ndarray
    y: np.ndarray
    params: ProjectionParams
    dims: tuple[int, int, int]
    consumed: bool = field(default=False, repr=False)


@dataclass
class AttentionOutput:
    z: np.ndarray
    attn: np.ndarray
    cache: NonlocalCache


class StaleCacheError(RuntimeError):
    pass


def nonlocal_forward(x: np.ndarray, params: ProjectionParams, spec: MaskSpec | None = None) -> AttentionOutput:
    """Residual (mask) non-local block on one feature map ``(T, H, W, C)``."""
    check_feature_map(x)
    T, H, W, C = x.shape
    if C != params.channels:
        raise ChannelMismatchError(f"input has {C} channels, params expect {params.channels}")
    dims = (T, H, W)
    n = T * H * W
    if n > MAX_DENSE_POSITIONS:
        raise ValueError(f"{n} positions exceed the dense limit {MAX_DENSE_POSITIONS}; use nonlocal_infer")
    spec = spec or MaskSpec.dense()
    xf = x.reshape(n, C)
    theta = xf @ params.w_theta.T
    phi = xf @ params.w_phi.T
    g = xf @ params.w_g.T
    mask = None if spec.is_dense(dims) else neighborhood_mask(spec, dims)
    attn = _masked_softmax(theta @ phi.T, mask)
    y = attn @ g
    z = y @ params.w_z.T + xf
    cache = NonlocalCache(xf, theta, phi, g, attn, y, params, dims)
    return AttentionOutput(z.reshape(x.shape), attn, cache)


def attention_core_backward(dy, theta, phi, g, attn, y):
    """Gradients of ``y = softmax(theta phi^T) g`` w.r.t. theta, phi, g.

    Masked entries of ``attn`` are zero, so the same formulas serve the
    masked case.
    """
    n, cb = theta.shape
    u = np.einsum("pk,pk->p", dy, y)
    if cb <= _LOWRANK_MAX_CB:
        # dS[p,q] = A[p,q] (dy_p . g_q - u_p); contract without forming dS.
        g_phi = (g[:, :, None] * phi[:, None, :]).reshape(n, cb * cb)
        m1 = attn @ np.concatenate([g_phi, phi], axis=1)
        d_theta = np.einsum("pk,pkc->pc", dy, m1[:, : cb * cb].reshape(n, cb, cb)) - u[:, None] * m1[:, cb * cb :]
        dy_theta = (dy[:, :, None] * theta[:, None, :]).reshape(n, cb * cb)
        m2 = attn.T @ np.concatenate([dy_theta, u[:, None] * theta, dy], axis=1)
        d_phi = np.einsum("qk,qkc->qc", g, m2[:, : cb * cb].reshape(n, cb, cb)) - m2[:, cb * cb : cb * cb + cb]
        d_g = m2[:, cb * cb + cb :]
    else:
        ds = dy @ g.T
        ds -= u[:, None]
        ds *= attn
        d_theta = ds @ phi
        d_phi = ds.T @ theta
        d_g = attn.T @ dy
    return d_theta, d_phi, d_g


def nonlocal_backward(out_grad: np.ndarray, cache: NonlocalCache) -> tuple[np.ndarray, ProjectionParams]:
    """Gradients w.r.t. the input map and all four weight matrices."""
    if cache.consumed:
        raise StaleCacheError("cache already consumed by a backward call")
    n, C = cache.x.shape
    if out_grad.shape != cache.dims + (C,):
        raise StaleCacheError(f"out_grad {out_grad.shape} does not match cached forward {cache.dims + (C,)}")
    cache.consumed = True
    p = cache.params
    dz = out_grad.reshape(n, C)
    dw_z = dz.T @ cache.y
    dy = dz @ p.w_z
    d_theta, d_phi, d_g = attention_core_backward(dy, cache.theta, cache.phi, cache.g, cache.attn, cache.y)
    dx = dz + d_theta @ p.w_theta + d_phi @ p.w_phi + d_g @ p.w_g
    grads = ProjectionParams(d_theta.T @ cache.x, d_phi.T @ cache.x, d_g.T @ cache.x, dw_z)
    return dx.reshape(out_grad.shape), grads


class FlopCount(NamedTuple):
    dense: int
    masked: int
    ratio: float


def flop_count(dims: tuple[int, int, int], channels: int, bottleneck: int, spec: MaskSpec) -> FlopCount:
    """Multiply-add FLOPs (2 per MAC) of one block forward.

    Pairwise terms cost ``2 N^2 C'`` for the scores plus ``2 N^2 C'`` for the
    aggregation; the masked block replaces ``N^2`` by the summed
    neighbourhood sizes.  Both include the four projections.
    """
    n = dims[0] * dims[1] * dims[2]
    proj = 4 * 2 * n * channels * bottleneck
    pairs = int(neighborhood_sizes(spec, dims).sum())
    dense = 4 * n * n * bottleneck + proj
    masked = 4 * pairs * bottleneck + proj
    return FlopCount(dense, masked, masked / dense)


def _project_all(x: np.ndarray, params: ProjectionParams):
    T, H, W, C = x.shape
    xf = x.reshape(-1, C)
    return xf, xf @ params.w_theta.T, xf @ params.w_phi.T, xf @ params.w_g.T


def nonlocal_infer_dense(x: np.ndarray, params: ProjectionParams, chunk: int = 1024) -> np.ndarray:
    """Dense forward without cache; query rows processed in chunks to bound memory."""
    check_feature_map(x)
    xf, theta, phi, g = _project_all(x, params)
    y = np.empty_like(g)
    phi_t = np.ascontiguousarray(phi.T)
    for a in range(0, len(xf), chunk):
        s = theta[a : a + chunk] @ phi_t
        s -= s.max(axis=1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=1, keepdims=True)
        y[a : a + chunk] = s @ g
    return (y @ params.w_z.T + xf).reshape(x.shape)


def _tile_sizes(dims, radii, min_tile):
    return tuple(n if r is None else min(n, max(r + 1, min_tile)) for n, r in zip(dims, radii))


def nonlocal_infer_windowed(
    x: np.ndarray, params: ProjectionParams, spec: MaskSpec, min_tile: int = 4
) -> np.ndarray:
    """Masked forward touching only keys near each query tile.

    Queries are grouped into axis-aligned tiles; each tile attends to the
    union of its members' neighbourhoods, and an additive 0/-inf bias
    restores the exact per-query mask.
    """
    check_feature_map(x)
    T, H, W, C = x.shape
    dims = (T, H, W)
    radii = spec.resolve(dims)
    xf, theta, phi, g = _project_all(x, params)
    cb = params.bottleneck
    theta = theta.reshape(T, H, W, cb)
    phi = phi.reshape(T, H, W, cb)
    gm = g.reshape(T, H, W, cb)
    y = np.empty_like(gm)
    tiles = _tile_sizes(dims, radii, min_tile)
    ninf = np.array(-np.inf, dtype=x.dtype)
    zero = np.array(0.0, dtype=x.dtype)

    def axis_ranges(n, tile, r):
        for a in range(0, n, tile):
            b = min(n, a + tile)
            if r is None:
                ka, kb = 0, n
            else:
                ka, kb = max(0, a - r), min(n, b + r)
            qi = np.arange(a, b)
            ki = np.arange(ka, kb)
            if r is None:
                bias = np.zeros((b - a, kb - ka), dtype=x.dtype)
            else:
                bias = np.where(np.abs(qi[:, None] - ki[None, :]) <= r, zero, ninf)
            yield slice(a, b), slice(ka, kb), bias

    t_r = list(axis_ranges(T, tiles[0], radii[0]))
    h_r = list(axis_ranges(H, tiles[1], radii[1]))
    w_r = list(axis_ranges(W, tiles[2], radii[2]))
    for qt, kt, bt in t_r:
        for qh, kh, bh in h_r:
            for qw, kw, bw in w_r:
                q = theta[qt, qh, qw].reshape(-1, cb)
                k = phi[kt, kh, kw].reshape(-1, cb)
                v = gm[kt, kh, kw].reshape(-1, cb)
                s = q @ k.T
                s6 = s.reshape(bt.shape[0], bh.shape[0], bw.shape[0], bt.shape[1], bh.shape[1], bw.shape[1])
                s6 += bt[:, None, None, :, None, None]
                s6 += bh[None, :, None, None, :, None]
                s6 += bw[None, None, :, None, None, :]
                s -= s.max(axis=1, keepdims=True)
                np.exp(s, out=s)
                s /= s.sum(axis=1, keepdims=True)
                y[qt, qh, qw] = (s @ v).reshape(bt.shape[0], bh.shape[0], bw.shape[0], cb)
    return (y.reshape(-1, cb) @ params.w_z.T + xf).reshape(x.shape)


def nonlocal_infer(x: np.ndarray, params: ProjectionParams, spec: MaskSpec | None = None) -> np.ndarray:
    """Forward pass for any size; picks the dense or windowed route."""
    spec = spec or MaskSpec.dense()
    if spec.is_dense(x.shape[:3]):
        return nonlocal_infer_dense(x, params)
    return nonlocal_infer_windowed(x, params, spec)
