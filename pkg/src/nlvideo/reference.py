"""Slow loop-based references for the vectorised blocks.

Nothing here shares code with the fast paths: neighbourhoods are tested
with explicit inequalities, patches are gathered index by index with bounds
checks instead of padding, and sums are written as loops.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def _radii(spec, dims):
    out = []
    for r, n in zip((spec.delta_t, spec.delta_h, spec.delta_w), dims):
        if r == math.inf:
            out.append(None)
        elif isinstance(r, Fraction):
            out.append(int(r.numerator * n // r.denominator))
        else:
            out.append(int(r))
    return out


def _positions(T, H, W):
    return [(t, h, w) for t in range(T) for h in range(H) for w in range(W)]


def _inside(p, q, radii):
    return all(r is None or abs(a - b) <= r for a, b, r in zip(p, q, radii))


def nonlocal_reference(x, w_theta, w_phi, w_g, w_z, spec=None):
    """Returns ``(z, attn)`` computed with explicit loops over (p, q, c)."""
    T, H, W, C = x.shape
    cb = w_theta.shape[0]
    pos = _positions(T, H, W)
    n = len(pos)
    radii = [None, None, None] if spec is None else _radii(spec, (T, H, W))
    theta = np.zeros((n, cb))
    phi = np.zeros((n, cb))
    g = np.zeros((n, cb))
    for p, (t, h, w) in enumerate(pos):
        for k in range(cb):
            for c in range(C):
                theta[p, k] += w_theta[k, c] * x[t, h, w, c]
                phi[p, k] += w_phi[k, c] * x[t, h, w, c]
                g[p, k] += w_g[k, c] * x[t, h, w, c]
    attn = np.zeros((n, n))
    z = np.zeros((T, H, W, C))
    for p, pp in enumerate(pos):
        logits = {}
        for q, qq in enumerate(pos):
            if _inside(pp, qq, radii):
                s = 0.0
                for k in range(cb):
                    s += theta[p, k] * phi[q, k]
                logits[q] = s
        top = max(logits.values())
        denom = sum(math.exp(s - top) for s in logits.values())
        y = np.zeros(cb)
        for q, s in logits.items():
            a = math.exp(s - top) / denom
            attn[p, q] = a
            for k in range(cb):
                y[k] += a * g[q, k]
        t, h, w = pp
        for c in range(C):
            acc = x[t, h, w, c]
            for k in range(cb):
                acc += w_z[c, k] * y[k]
            z[t, h, w, c] = acc
    return z, attn


def _patch(x, center, radii):
    T, H, W, C = x.shape
    t0, h0, w0 = center
    vals = []
    for dt in range(-radii[0], radii[0] + 1):
        for dh in range(-radii[1], radii[1] + 1):
            for dw in range(-radii[2], radii[2] + 1):
                t, h, w = t0 + dt, h0 + dh, w0 + dw
                if 0 <= t < T and 0 <= h < H and 0 <= w < W:
                    vals.extend(x[t, h, w, c] for c in range(C))
                else:
                    vals.extend(0.0 for _ in range(C))
    return np.array(vals)


def relation_vectors_reference(x, layer1, layer2, receptive, normalize=True):
    T, H, W, _ = x.shape
    out = np.zeros((T, H, W, layer2.shape[0]))
    for t, h, w in _positions(T, H, W):
        patch = _patch(x, (t, h, w), receptive)
        hidden = np.array([max(0.0, float(np.dot(row, patch))) for row in layer1])
        logits = np.array([float(np.dot(row, hidden)) for row in layer2])
        if normalize:
            e = np.exp(logits - logits.max())
            logits = e / e.sum()
        out[t, h, w] = logits
    return out


def relation_aggregate_reference(x, r, w_g, w_z, output):
    """``z_i = x_i + w_z sum_j r_i[j] g(x_{i+j})`` with neighbours outside the map skipped."""
    T, H, W, C = x.shape
    cb = w_g.shape[0]
    z = np.zeros_like(x, dtype=np.float64)
    for t, h, w in _positions(T, H, W):
        y = np.zeros(cb)
        k = 0
        for dt in range(-output[0], output[0] + 1):
            for dh in range(-output[1], output[1] + 1):
                for dw in range(-output[2], output[2] + 1):
                    tt, hh, ww = t + dt, h + dh, w + dw
                    if 0 <= tt < T and 0 <= hh < H and 0 <= ww < W:
                        for j in range(cb):
                            gj = sum(w_g[j, c] * x[tt, hh, ww, c] for c in range(C))
                            y[j] += r[t, h, w, k] * gj
                    k += 1
        for c in range(C):
            z[t, h, w, c] = x[t, h, w, c] + sum(w_z[c, j] * y[j] for j in range(cb))
    return z


def conv3d_reference(x, kernel, pad):
    """Direct loop cross-correlation, channels-first ``x`` of shape (C, T, H, W)."""
    C, T, H, W = x.shape
    co, ci, kt, kh, kw = kernel.shape
    pt, ph, pw = pad
    To, Ho, Wo = T + 2 * pt - kt + 1, H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    out = np.zeros((co, To, Ho, Wo))
    for o in range(co):
        for t in range(To):
            for h in range(Ho):
                for w in range(Wo):
                    acc = 0.0
                    for c in range(ci):
                        for a in range(kt):
                            for b in range(kh):
                                for d in range(kw):
                                    tt, hh, ww = t + a - pt, h + b - ph, w + d - pw
                                    if 0 <= tt < T and 0 <= hh < H and 0 <= ww < W:
                                        acc += kernel[o, c, a, b, d] * x[c, tt, hh, ww]
                    out[o, t, h, w] = acc
    return out


def conv2d_reference(frame, kernel, pad):
    """``frame`` (C, H, W), ``kernel`` (C_out, C_in, k, k)."""
    C, H, W = frame.shape
    co, ci, kh, kw = kernel.shape
    Ho, Wo = H + 2 * pad - kh + 1, W + 2 * pad - kw + 1
    out = np.zeros((co, Ho, Wo))
    for o in range(co):
        for h in range(Ho):
            for w in range(Wo):
                acc = 0.0
                for c in range(ci):
                    for b in range(kh):
                        for d in range(kw):
                            hh, ww = h + b - pad, w + d - pad
                            if 0 <= hh < H and 0 <= ww < W:
                                acc += kernel[o, c, b, d] * frame[c, hh, ww]
                out[o, h, w] = acc
    return out


def neighborhood_count_reference(spec, dims):
    """Sum of neighbourhood sizes by enumerating every (p, q) pair."""
    T, H, W = dims
    radii = _radii(spec, dims)
    pos = _positions(T, H, W)
    return sum(1 for p in pos for q in pos if _inside(p, q, radii))
