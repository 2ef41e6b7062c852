import math

import numpy as np
import pytest

from nlvideo.attention import MaskSpec
from nlvideo.model import BLOCK_KINDS, build_model, coordinate_channels, model_backward, model_forward
from nlvideo.reference import conv3d_reference, nonlocal_reference
from nlvideo.synth import Dataset, SynthConfig, generate_synthetic
from nlvideo.tensor import softmax_rows, softmax_rows_backward
from nlvideo.train import (
    NonFiniteError,
    SGDConfig,
    TrainingDivergedError,
    accuracy,
    clip_gradients,
    cross_entropy,
    format_trace_csv,
    grad_check,
    sgd_step,
    train_loop,
)


def small_model(kind, seed=0, stride=2, **kw):
    kw.setdefault("receptive", (1, 2, 2))
    kw.setdefault("output", (0, 1, 1))
    m = build_model(kind, num_classes=4, stem_channels=3, rng=seed, stem_stride=stride, **kw)
    rng = np.random.default_rng(seed + 100)
    m.params["classifier"] = rng.standard_normal(m.params["classifier"].shape)
    m.params["bias"] = rng.standard_normal(4)
    # Unit-scale residual weights keep gradients well above the rounding
    # noise of central differences.
    for k in ("layer2", "w_z"):
        if k in m.params:
            m.params[k] = rng.standard_normal(m.params[k].shape)
    return m


def tiny_video(seed=0, shape=(4, 8, 8)):
    return np.random.default_rng(seed).standard_normal(shape + (1,))


class TestModelForward:
    def test_none_zero_classifier_gives_bias(self):
        m = build_model("none", rng=0)
        m.params["bias"] = np.arange(8.0)
        assert np.array_equal(model_forward(m, tiny_video(shape=(8, 16, 16))), np.arange(8.0))

    def test_mask_nonlocal_zero_residual_equals_none(self):
        mnl = small_model("mask_nonlocal")
        mnl.params["w_z"] = np.zeros_like(mnl.params["w_z"])
        none = small_model("none")
        for k in ("stem", "classifier", "bias"):
            none.params[k] = mnl.params[k]
        v = tiny_video(1)
        assert np.array_equal(model_forward(mnl, v), model_forward(none, v))

    @pytest.mark.parametrize("kind", ["nonlocal", "mask_nonlocal"])
    def test_composition_of_oracles(self, kind):
        m = small_model(kind, stride=1)
        v = tiny_video(2, (3, 4, 4))
        x = (v - v.mean()) / v.std()
        pre = conv3d_reference(x.transpose(3, 0, 1, 2), m.params["stem"], (0, 1, 1))
        feats = np.concatenate([np.maximum(pre, 0).transpose(1, 2, 3, 0), coordinate_channels((3, 4, 4))], axis=-1)
        p = m.params
        z, _ = nonlocal_reference(feats, p["w_theta"], p["w_phi"], p["w_g"], p["w_z"], m.mask)
        logits = p["classifier"] @ z.reshape(-1, z.shape[-1]).mean(axis=0) + p["bias"]
        assert np.max(np.abs(model_forward(m, v) - logits)) <= 1e-12

    def test_default_mask_is_best_row(self):
        m = build_model("mask_nonlocal", rng=0)
        assert m.mask.resolve((8, 8, 8)) == (4, 3, 3)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            build_model("transformer")

    def test_bad_video_shape(self):
        with pytest.raises(ValueError):
            model_forward(build_model("none", rng=0), np.zeros((8, 16, 16)))

    def test_initial_loss_is_log_classes(self):
        tr, _ = generate_synthetic(SynthConfig(n_train=8, n_test=0))
        for kind in BLOCK_KINDS:
            m = build_model(kind, rng=0, residual_init="zero")
            for v, y in zip(tr.videos, tr.labels):
                loss, _ = cross_entropy(model_forward(m, v), int(y))
                assert abs(loss - math.log(8)) <= 1e-6


def _model_check(kind, seed, stride, eps=1e-6):
    """Normwise relative gradient error per parameter array.

    The full model has thousands of weights, a few of which always have
    near-zero gradients; per-coordinate ratios on those measure rounding
    rather than the backward pass, so arrays are compared as a whole here.
    """
    m = small_model(kind, seed, stride)
    v = tiny_video(seed, (4, 6, 6) if stride == 1 else (4, 12, 12))
    probe = np.random.default_rng(seed).standard_normal(4)
    _, cache = model_forward(m, v, keep_cache=True)
    analytic = model_backward(m, cache, probe)
    worst = 0.0
    for name, arr in m.params.items():
        flat = arr.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = model_forward(m, v)
            flat[i] = orig - eps
            minus = model_forward(m, v)
            flat[i] = orig
            numeric[i] = probe @ (plus - minus) / (2 * eps)
        a = analytic[name].reshape(-1)
        worst = max(worst, np.linalg.norm(a - numeric) / max(np.linalg.norm(numeric), 1e-8))
    return worst


class TestModelBackward:
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("kind", BLOCK_KINDS)
    @pytest.mark.parametrize("seed", range(2))
    def test_gradcheck(self, kind, seed, stride):
        assert _model_check(kind, seed, stride) <= 1e-6


class TestCrossEntropy:
    def test_uniform(self):
        loss, grad = cross_entropy(np.zeros(8), 3)
        assert loss == pytest.approx(math.log(8), abs=1e-15)
        assert abs(grad.sum()) <= 1e-12

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("eps, tol", [(1e-6, 1e-5), (1e-5, 1e-8)])
    def test_gradcheck(self, seed, eps, tol):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(6)
        label = int(rng.integers(0, 6))
        err = grad_check(
            lambda a: np.array(cross_entropy(a["z"], label)[0]),
            lambda a, g: {"z": g * cross_entropy(a["z"], label)[1]},
            {"z": z},
            eps=eps,
            seed=seed,
        )
        assert err <= tol

    def test_large_logits(self):
        loss, grad = cross_entropy(np.array([1000.0, 0.0]), 1)
        assert loss == pytest.approx(1000.0)
        assert np.all(np.isfinite(grad))

    def test_label_range(self):
        with pytest.raises(ValueError):
            cross_entropy(np.zeros(3), 3)


class TestSGD:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, 2.0])}
        new, _ = sgd_step(p, {"w": np.zeros(2)}, {"w": np.zeros(2)}, SGDConfig(lr=0.1))
        assert np.array_equal(new["w"], p["w"])

    def test_plain_descent(self):
        p, g = {"w": np.array([1.0, -2.0])}, {"w": np.array([0.5, 0.25])}
        new, _ = sgd_step(p, g, {}, SGDConfig(lr=0.1, momentum=0.0))
        assert np.array_equal(new["w"], p["w"] - 0.1 * g["w"])

    def test_two_momentum_steps(self):
        p, g = {"w": np.array([0.0])}, {"w": np.array([1.0])}
        cfg = SGDConfig(lr=0.01, momentum=0.9)
        p1, s = sgd_step(p, g, {}, cfg)
        p2, _ = sgd_step(p1, g, s, cfg)
        assert p2["w"][0] == pytest.approx(-0.01 * (1 + 1.9), abs=1e-15)

    def test_inputs_not_mutated(self):
        p, g = {"w": np.array([1.0])}, {"w": np.array([1.0])}
        sgd_step(p, g, {}, SGDConfig())
        assert p["w"][0] == 1.0

    @pytest.mark.parametrize("kwargs", [{"lr": -1}, {"momentum": 1.0}, {"batch_size": 0}, {"clip_norm": 0}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            SGDConfig(**kwargs)

    def test_schedule(self):
        cfg = SGDConfig(lr=1.0, lr_decay=0.1, decay_epochs=(2, 4))
        assert [cfg.lr_at(e) for e in range(5)] == pytest.approx([1, 1, 0.1, 0.1, 0.01])

    def test_clip_gradients(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_gradients(g, 1.0) == 5.0
        assert g["a"][0] == pytest.approx(0.6) and g["b"][0] == pytest.approx(0.8)
        h = {"a": np.array([0.3])}
        clip_gradients(h, 1.0)
        assert h["a"][0] == 0.3


def _tiny_data(n=16, seed=0):
    tr, te = generate_synthetic(SynthConfig(n_train=n, n_test=8, seed=seed))
    return tr, te


class TestTrainLoop:
    def test_zero_lr_constant(self):
        tr, _ = _tiny_data()
        m = build_model("none", rng=0)
        res = train_loop(m, tr, SGDConfig(lr=0.0, epochs=3, batch_size=4))
        assert len({s.train_loss for s in res.trace}) == 1
        for k in m.params:
            assert np.array_equal(res.model.params[k], m.params[k])

    @pytest.mark.parametrize("kind", ["nonlocal", "relation"])
    def test_overfits_small_set(self, kind):
        tr, _ = _tiny_data()
        m = build_model(kind, rng=0)
        res = train_loop(m, tr, SGDConfig(lr=0.1, epochs=50, batch_size=4, decay_epochs=()))
        assert res.trace[-1].train_loss < 0.5 * res.trace[0].train_loss

    def test_deterministic_and_threads(self):
        tr, te = _tiny_data()
        cfg = SGDConfig(epochs=2, batch_size=4)
        m = build_model("mask_nonlocal", rng=1)
        a = train_loop(m, tr, cfg, te)
        b = train_loop(m, tr, cfg, te)
        c = train_loop(m, tr, cfg, te, threads=2)
        assert format_trace_csv(a.trace) == format_trace_csv(b.trace)
        assert abs(a.trace[-1].train_loss - c.trace[-1].train_loss) <= 1e-6
        assert abs(a.trace[-1].test_acc - c.trace[-1].test_acc) <= 1e-6

    def test_divergence(self):
        tr, _ = _tiny_data(4)
        bad = Dataset(tr.videos.copy(), tr.labels)
        bad.videos[0, 0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingDivergedError):
            train_loop(build_model("none", rng=0), bad, SGDConfig(epochs=1, batch_size=4))

    def test_empty(self):
        with pytest.raises(ValueError):
            train_loop(build_model("none", rng=0), Dataset(np.zeros((0, 8, 16, 16, 1)), np.zeros(0, int)), SGDConfig())

    def test_trace_csv(self):
        tr, te = _tiny_data(4)
        res = train_loop(build_model("none", rng=0), tr, SGDConfig(epochs=1, batch_size=4), te)
        lines = format_trace_csv(res.trace).splitlines()
        assert lines[0] == "epoch,train_loss,train_acc,test_acc"
        assert lines[1].startswith("0,")
        assert accuracy(res.model, te) == res.trace[-1].test_acc


class TestGradCheck:
    def test_linear_map(self):
        # Small integers and a power-of-two step keep every difference exact.
        rng = np.random.default_rng(0)
        w = rng.integers(-4, 5, size=(3, 4)).astype(float)
        x = rng.integers(-3, 4, size=4).astype(float)
        err = grad_check(lambda a: w @ a["x"], lambda a, g: {"x": w.T @ g}, {"x": x}, eps=2.0**-20)
        assert err <= 1e-10

    @pytest.mark.parametrize("seed", range(20))
    def test_softmax(self, seed):
        s = np.random.default_rng(seed).standard_normal((3, 5))

        def bwd(a, g):
            return {"s": softmax_rows_backward(softmax_rows(a["s"]), g)}

        assert grad_check(lambda a: softmax_rows(a["s"]), bwd, {"s": s}, seed=seed) <= 1e-7

    def test_detects_wrong_gradient(self):
        err = grad_check(lambda a: a["x"] ** 2, lambda a, g: {"x": g * a["x"]}, {"x": np.array([1.0, 2.0])})
        assert err > 0.1

    @pytest.mark.parametrize("eps", [1e-9, 1e-3])
    def test_eps_range(self, eps):
        with pytest.raises(ValueError):
            grad_check(lambda a: a["x"], lambda a, g: {"x": g}, {"x": np.ones(2)}, eps=eps)

    @pytest.mark.filterwarnings("ignore:invalid value encountered in log:RuntimeWarning")
    def test_non_finite(self):
        with pytest.raises(NonFiniteError):
            grad_check(lambda a: np.log(a["x"]), lambda a, g: {"x": g / a["x"]}, {"x": np.array([-1.0])})
