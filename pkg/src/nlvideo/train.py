"""SGD training loop, cross-entropy loss and finite-difference gradient checks."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .model import ToyModel, model_backward, model_forward
from .synth import Dataset
from .tensor import softmax_rows

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Return ``(-log softmax(logits)[label], softmax(logits) - onehot(label))``."""
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    shifted = logits - logits.max()
    log_z = math.log(np.exp(shifted).sum())
    probs = softmax_rows(logits[None])[0]
    grad = probs.copy()
    grad[label] -= 1.0
    return float(log_z - shifted[label]), grad


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 0.5
    momentum: float = 0.9
    epochs: int = 12
    batch_size: int = 10
    seed: int = 0
    lr_decay: float = 0.1
    decay_epochs: tuple[int, ...] = (8, 11)
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** sum(1 for e in self.decay_epochs if epoch >= e)


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: Mapping[str, np.ndarray],
    cfg: SGDConfig,
    lr: float | None = None,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Heavy-ball update ``v <- m v + g``, ``p <- p - lr v``; returns new dicts."""
    lr = cfg.lr if lr is None else lr
    new_params, new_state = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            if name in state:
                new_state[name] = state[name]
            continue
        v = cfg.momentum * state[name] + g if name in state else np.array(g, copy=True)
        new_state[name] = v
        new_params[name] = p - p.dtype.type(lr) * v.astype(p.dtype, copy=False)
    return new_params, new_state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] *= grads[k].dtype.type(scale)
    return norm


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float | None


@dataclass
class TrainResult:
    model: ToyModel
    trace: list[EpochStats] = field(default_factory=list)


def _sample_grad(model: ToyModel, video: np.ndarray, label: int):
    logits, cache = model_forward(model, video, keep_cache=True)
    if not np.isfinite(logits).all():
        raise TrainingDivergedError("non-finite logits")
    loss, dlogits = cross_entropy(logits, int(label))
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss}")
    return loss, int(np.argmax(logits) == label), model_backward(model, cache, dlogits)


def predict(model: ToyModel, videos: np.ndarray) -> np.ndarray:
    return np.stack([model_forward(model, v) for v in videos])


def accuracy(model: ToyModel, ds: Dataset) -> float:
    if len(ds) == 0:
        return float("nan")
    logits = predict(model, ds.videos)
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels))


def train_loop(
    model: ToyModel,
    train: Dataset,
    cfg: SGDConfig,
    test: Dataset | None = None,
    threads: int = 1,
) -> TrainResult:
    """Mini-batch SGD with seeded shuffling.

    Per-sample gradients inside a batch may run on ``threads`` workers; they
    are always summed in sample order, so the result does not depend on the
    thread count.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    state: dict[str, np.ndarray] = {}
    result = TrainResult(model)
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            order = rng.permutation(len(train))
            total_loss, correct = 0.0, 0
            for a in range(0, len(order), cfg.batch_size):
                idx = order[a : a + cfg.batch_size]
                jobs = [(model, train.videos[i], train.labels[i]) for i in idx]
                outs = list(pool.map(lambda j: _sample_grad(*j), jobs)) if pool else [_sample_grad(*j) for j in jobs]
                batch = {k: np.zeros_like(v) for k, v in model.params.items()}
                for loss, hit, g in outs:
                    total_loss += loss
                    correct += hit
                    for k, v in g.items():
                        batch[k] += v
                for k in batch:
                    batch[k] /= len(idx)
                clip_gradients(batch, cfg.clip_norm)
                model.params, state = sgd_step(model.params, batch, state, cfg, lr)
                if not all(np.isfinite(v).all() for v in model.params.values()):
                    raise TrainingDivergedError(f"non-finite parameters in epoch {epoch}")
            test_acc = accuracy(model, test) if test is not None else None
            stats = EpochStats(epoch, total_loss / len(order), correct / len(order), test_acc)
            result.trace.append(stats)
            log.info("%s epoch %d loss %.4f train %.3f test %s", model.kind, epoch, stats.train_loss,
                     stats.train_acc, "-" if test_acc is None else f"{test_acc:.3f}")
    finally:
        if pool:
            pool.shutdown()
    result.model = model
    return result


def format_trace_csv(trace: list[EpochStats]) -> str:
    lines = ["epoch,train_loss,train_acc,test_acc"]
    for s in trace:
        test = "" if s.test_acc is None else f"{s.test_acc:.6f}"
        lines.append(f"{s.epoch},{s.train_loss:.9g},{s.train_acc:.6f},{test}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

Forward = Callable[[dict[str, np.ndarray]], np.ndarray]
Backward = Callable[[dict[str, np.ndarray], np.ndarray], dict[str, np.ndarray]]


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    forward: Forward,
    backward: Backward,
    arrays: dict[str, np.ndarray],
    eps: float = 1e-6,
    seed: int = 0,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The scalar under test is ``sum(R * forward(arrays))`` for a random ``R``.
    Each coordinate of every array in ``arrays`` is perturbed by ``+-eps``;
    the difference of the two outputs is taken before contracting with
    ``R`` to keep rounding error low.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError(f"eps {eps} outside [1e-8, 1e-4]")
    arrays = {k: np.array(v, dtype=np.float64, copy=True) for k, v in arrays.items()}
    out = forward(arrays)
    if not np.isfinite(out).all():
        raise NonFiniteError("forward produced non-finite values")
    probe = np.random.default_rng(seed).standard_normal(out.shape)
    analytic = backward(arrays, probe)
    worst = 0.0
    for name, arr in arrays.items():
        ga = analytic[name]
        if ga.shape != arr.shape:
            raise ValueError(f"gradient for {name} has shape {ga.shape}, expected {arr.shape}")
        flat = arr.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = forward(arrays)
            flat[i] = orig - eps
            minus = forward(arrays)
            flat[i] = orig
            numeric = float(np.sum(probe * (plus - minus))) / (2 * eps)
            if not math.isfinite(numeric) or not math.isfinite(gflat[i]):
                raise NonFiniteError(f"non-finite gradient for {name}[{i}]")
            worst = max(worst, relative_error(float(gflat[i]), numeric))
    return worst
