"""Verification suites behind the ``gradcheck`` and ``oracle`` subcommands.

Both are plain functions returning per-target results so that tests and the
command line share one implementation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import (
    INF,
    MaskSpec,
    ProjectionParams,
    _masked_softmax,
    neighborhood_mask,
    nonlocal_backward,
    nonlocal_forward,
    nonlocal_infer_dense,
    nonlocal_infer_windowed,
    pairwise_scores,
)
from .pipeline import conv3d, conv3d_backward
from .reference import (
    conv3d_reference,
    nonlocal_reference,
    relation_aggregate_reference,
    relation_vectors_reference,
)
from .relation import (
    RelationField,
    RelationNetParams,
    compute_relation_vectors,
    relation_aggregate,
    relation_backward,
    relation_forward,
)
from .tensor import softmax_rows, softmax_rows_backward
from .train import cross_entropy, grad_check


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.value <= self.threshold

    def line(self, metric: str) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<16} {metric}={self.value:.3e} threshold={self.threshold:.0e} n={self.instances}"


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------


def _gc_softmax(seed: int, eps: float) -> float:
    s = np.random.default_rng(seed).standard_normal((4, 6))
    return grad_check(
        lambda a: softmax_rows(a["s"]),
        lambda a, g: {"s": softmax_rows_backward(softmax_rows(a["s"]), g)},
        {"s": s},
        eps,
        seed,
    )


def _gc_nonlocal(spec: MaskSpec | None):
    def run(seed: int, eps: float) -> float:
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 2, 2, 3))
        p = ProjectionParams.init(3, 2, rng)
        p.w_z = rng.standard_normal(p.w_z.shape)
        names = list(p.arrays())

        def params(a):
            return ProjectionParams(*(a[k] for k in names))

        def bwd(a, g):
            dx, gp = nonlocal_backward(g, nonlocal_forward(a["x"], params(a), spec).cache)
            return {"x": dx, **gp.arrays()}

        return grad_check(lambda a: nonlocal_forward(a["x"], params(a), spec).z, bwd, {"x": x, **p.arrays()}, eps, seed)

    return run


def _gc_relation(seed: int, eps: float) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 5, 5, 2))
    # A narrow hidden layer keeps near-zero gradient entries, whose central
    # differences are dominated by rounding, rare.
    p = RelationNetParams.init(2, (1, 2, 2), (0, 1, 1), hidden=4, rng=rng)
    p.layer2 = rng.standard_normal(p.layer2.shape)
    p.w_z = rng.standard_normal(p.w_z.shape)
    names = list(p.arrays())

    def params(a):
        return p.with_arrays({k: a[k] for k in names})

    def bwd(a, g):
        dx, gp = relation_backward(g, relation_forward(a["x"], params(a)).cache)
        return {"x": dx, **gp.arrays()}

    return grad_check(lambda a: relation_forward(a["x"], params(a)).z, bwd, {"x": x, **p.arrays()}, eps, seed)


def _gc_conv3d(seed: int, eps: float) -> float:
    rng = np.random.default_rng(seed)
    arrays = {"x": rng.standard_normal((2, 3, 4, 4)), "k": rng.standard_normal((2, 2, 3, 3, 3))}

    def bwd(a, g):
        dx, dk = conv3d_backward(g, a["x"], a["k"], "same")
        return {"x": dx, "k": dk}

    return grad_check(lambda a: conv3d(a["x"], a["k"], "same"), bwd, arrays, eps, seed)


def _gc_cross_entropy(seed: int, eps: float) -> float:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(8)
    label = int(rng.integers(0, 8))
    return grad_check(
        lambda a: np.array(cross_entropy(a["z"], label)[0]),
        lambda a, g: {"z": g * cross_entropy(a["z"], label)[1]},
        {"z": z},
        eps,
        seed,
    )


GRADCHECK_TARGETS: dict[str, Callable[[int, float], float]] = {
    "softmax": _gc_softmax,
    "nonlocal": _gc_nonlocal(None),
    "mask-nonlocal": _gc_nonlocal(MaskSpec(1, 0, 1)),
    "relation": _gc_relation,
    "conv3d": _gc_conv3d,
    "cross-entropy": _gc_cross_entropy,
}


def run_gradcheck(seed: int = 0, n_seeds: int = 20, eps: float = 1e-6, threshold: float = 1e-5) -> list[CheckResult]:
    results = []
    for name, fn in GRADCHECK_TARGETS.items():
        worst = max(fn(seed + i, eps) for i in range(n_seeds))
        results.append(CheckResult(name, worst, threshold, n_seeds))
    return results


# ---------------------------------------------------------------------------
# oracle sweep
# ---------------------------------------------------------------------------


def _random_spec(rng, dims) -> MaskSpec:
    return MaskSpec(*(INF if rng.random() < 0.25 else int(rng.integers(0, n)) for n in dims))


def _instance(rng, max_extent, max_channels):
    dims = tuple(int(n) for n in rng.integers(1, max_extent + 1, size=3))
    c = int(rng.integers(1, max_channels + 1))
    x = rng.standard_normal(dims + (c,))
    p = ProjectionParams.init(c, max(1, c // 2), rng)
    p.w_z = rng.standard_normal(p.w_z.shape)
    return dims, x, p


def _corrupt(out: np.ndarray) -> np.ndarray:
    out = np.array(out, copy=True)
    out.flat[0] = -out.flat[0]
    return out


def _op_nonlocal_dense(rng, max_extent, max_channels):
    _, x, p = _instance(rng, max_extent, max_channels)
    ref, _ = nonlocal_reference(x, p.w_theta, p.w_phi, p.w_g, p.w_z, None)
    return nonlocal_forward(x, p).z, ref


def _op_nonlocal_masked(rng, max_extent, max_channels):
    dims, x, p = _instance(rng, max_extent, max_channels)
    spec = _random_spec(rng, dims)
    ref, _ = nonlocal_reference(x, p.w_theta, p.w_phi, p.w_g, p.w_z, spec)
    return nonlocal_forward(x, p, spec).z, ref


def _op_mask_all_inf(rng, max_extent, max_channels):
    # The masked softmax with an all-true mask against the unmasked one.
    dims, x, p = _instance(rng, max_extent, max_channels)
    xf = x.reshape(-1, x.shape[-1])
    s = pairwise_scores((xf @ p.w_theta.T).reshape(dims + (-1,)), (xf @ p.w_phi.T).reshape(dims + (-1,)))
    full = neighborhood_mask(MaskSpec(INF, INF, INF), dims)
    return _masked_softmax(s, full), _masked_softmax(s, None)


def _op_windowed(rng, max_extent, max_channels):
    dims, x, p = _instance(rng, max_extent, max_channels)
    spec = _random_spec(rng, dims)
    ref, _ = nonlocal_reference(x, p.w_theta, p.w_phi, p.w_g, p.w_z, spec)
    return nonlocal_infer_windowed(x, p, spec, min_tile=int(rng.integers(1, 4))), ref


def _op_dense_chunked(rng, max_extent, max_channels):
    _, x, p = _instance(rng, max_extent, max_channels)
    ref, _ = nonlocal_reference(x, p.w_theta, p.w_phi, p.w_g, p.w_z, None)
    return nonlocal_infer_dense(x, p, chunk=int(rng.integers(1, 8))), ref


def _relation_instance(rng, max_extent, max_channels):
    # Relation radii need r1 < r0 < extent / 2, so extents start at 3.
    lo = 3
    hi = max(lo, max_extent)
    dims = tuple(int(n) for n in rng.integers(lo, hi + 1, size=3))
    c = int(rng.integers(1, min(max_channels, 4) + 1))
    receptive = tuple(int(rng.integers(1, (n - 1) // 2 + 1)) for n in dims)
    output = tuple(int(rng.integers(0, r0)) for r0 in receptive)
    p = RelationNetParams.init(c, receptive, output, rng=rng, normalize_relations=bool(rng.integers(0, 2)))
    p.layer2 = rng.standard_normal(p.layer2.shape)
    p.w_z = rng.standard_normal(p.w_z.shape)
    return rng.standard_normal(dims + (c,)), p


def _op_relation_vectors(rng, max_extent, max_channels):
    x, p = _relation_instance(rng, max_extent, max_channels)
    ref = relation_vectors_reference(x, p.layer1, p.layer2, p.receptive, p.normalize_relations)
    return compute_relation_vectors(x, p).r, ref


def _op_relation_aggregate(rng, max_extent, max_channels):
    x, p = _relation_instance(rng, max_extent, max_channels)
    r = rng.standard_normal(x.shape[:3] + (p.num_relations,))
    ref = relation_aggregate_reference(x, r, p.w_g, p.w_z, p.output)
    return relation_aggregate(x, RelationField(r), p), ref


def _op_conv3d(rng, max_extent, max_channels):
    dims = tuple(int(n) for n in rng.integers(1, max_extent + 1, size=3))
    ci, co = (int(v) for v in rng.integers(1, 4, size=2))
    kt, k = (int(v) for v in rng.choice([1, 3], size=2))
    x = rng.standard_normal((ci,) + dims)
    kernel = rng.standard_normal((co, ci, kt, k, k))
    pad = ((kt - 1) // 2, (k - 1) // 2, (k - 1) // 2)
    return conv3d(x, kernel, pad), conv3d_reference(x, kernel, pad)


ORACLE_TARGETS = {
    "nonlocal-dense": _op_nonlocal_dense,
    "nonlocal-masked": _op_nonlocal_masked,
    "mask-all-inf": _op_mask_all_inf,
    "windowed-infer": _op_windowed,
    "dense-infer": _op_dense_chunked,
    "relation-vectors": _op_relation_vectors,
    "relation-agg": _op_relation_aggregate,
    "conv3d": _op_conv3d,
}


def run_oracle(
    seed: int = 0,
    instances: int = 100,
    max_extent: int = 4,
    max_channels: int = 8,
    threshold: float = 1e-12,
    fault: str | None = None,
) -> list[CheckResult]:
    """Max abs difference of each fast path against its loop reference.

    ``fault`` names a target whose fast output gets one sign flipped, to
    show that the sweep notices a broken build.
    """
    if fault is not None and fault not in ORACLE_TARGETS:
        raise ValueError(f"unknown fault target {fault!r}")
    results = []
    for k, (name, op) in enumerate(ORACLE_TARGETS.items()):
        rng = np.random.default_rng([seed, k])
        worst = 0.0
        for _ in range(instances):
            fast, ref = op(rng, max_extent, max_channels)
            if name == fault:
                fast = _corrupt(fast)
            worst = max(worst, float(np.max(np.abs(fast - ref))))
        results.append(CheckResult(name, worst, threshold, instances))
    return results
