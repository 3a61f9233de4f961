"""Convolutional regressor: forward oracle, gradients, training, checkpoints."""

import numpy as np
import pytest

import panicle.net as net
from panicle.errors import FormatError, ParameterError, ShapeError, TrainingError
from panicle.grid import RasterGrid, sum_pool
from panicle.net import (
    BN_EPS,
    ModelState,
    NetConfig,
    ccnn_config,
    forward,
    init_model,
    input_stack,
    load_checkpoint,
    loss_and_gradients,
    predict_count,
    predict_density,
    save_checkpoint,
    train,
    tuned_config,
)

TINY = NetConfig(dims=(2, 1), kernels=(3, 1), pool_before=frozenset(), input_channels=3)
TINY_POOL = NetConfig(dims=(2, 1), kernels=(3, 3), pool_before=frozenset({1}), input_channels=3)


def randomized_model(config, seed=0):
    """Float64 model with every parameter (head included) randomized."""
    model = init_model(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for _, p in model.named_params():
        p[...] = rng.normal(0.0, 0.5, size=p.shape)
    for l in range(config.n_layers - 1):
        model.bn_mean[l] = rng.normal(0.0, 0.2, size=config.dims[l])
        model.bn_var[l] = rng.uniform(0.5, 1.5, size=config.dims[l])
    return model


def naive_conv(x, w, b):
    """Same-padded convolution by quadruple loop."""
    h, wd, cin = x.shape
    k = w.shape[0]
    cout = w.shape[3]
    r = k // 2
    out = np.zeros((h, wd, cout))
    for i in range(h):
        for j in range(wd):
            acc = b.astype(np.float64).copy()
            for ki in range(k):
                for kj in range(k):
                    si, sj = i + ki - r, j + kj - r
                    if 0 <= si < h and 0 <= sj < wd:
                        acc += x[si, sj] @ w[ki, kj]
            out[i, j] = acc
    return out


def naive_pool(x):
    h, wd, c = x.shape
    out = np.zeros((h // 2, wd // 2, c))
    for i in range(h // 2):
        for j in range(wd // 2):
            out[i, j] = x[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].reshape(4, c).max(axis=0)
    return out


def naive_forward_eval(model, x):
    """Loop-based replica of the inference contract with running statistics."""
    cfg = model.config
    x = np.asarray(x, dtype=np.float64)
    last = cfg.n_layers - 1
    for l in range(cfg.n_layers):
        if l in cfg.pool_before:
            x = naive_pool(x)
        x = naive_conv(x, np.asarray(model.weights[l], dtype=np.float64), model.biases[l])
        if l < last:
            x = (
                model.bn_scale[l]
                * (x - model.bn_mean[l])
                / np.sqrt(model.bn_var[l] + BN_EPS)
                + model.bn_shift[l]
            )
            x = np.maximum(x, 0.0)
    return np.maximum(x, 0.0)


class TestNetConfig:
    def test_tuned_canonical(self):
        cfg = tuned_config()
        assert cfg.dims == (20, 40, 100, 400, 800, 1500, 100, 1)
        assert cfg.kernels == (13, 9, 5, 5, 5, 3, 1, 1)
        assert cfg.pool_before == frozenset({1, 2})
        assert cfg.pool_factor == 4

    def test_tuned_width_scale(self):
        cfg = tuned_config(width_scale=0.25)
        assert cfg.dims == (5, 10, 25, 100, 200, 375, 25, 1)
        assert cfg.dims[-1] == 1

    def test_ccnn_canonical(self):
        cfg = ccnn_config()
        assert cfg.dims == (32, 32, 32, 1000, 400, 1)
        assert cfg.kernels == (7, 7, 3, 1, 1, 1)

    def test_validation(self):
        with pytest.raises(ParameterError):
            NetConfig(dims=(2, 1), kernels=(4, 1))  # even kernel
        with pytest.raises(ParameterError):
            NetConfig(dims=(2, 3), kernels=(3, 1))  # last dim != 1
        with pytest.raises(ParameterError):
            NetConfig(dims=(2, 1), kernels=(3,))  # length mismatch
        with pytest.raises(ParameterError):
            NetConfig(dims=(2, 1), kernels=(3, 1), target_scale=0.0)

    def test_json_round_trip(self):
        cfg = tuned_config(input_channels=5, width_scale=0.5, target_scale=100.0)
        back = NetConfig.from_json(cfg.to_json())
        assert back == cfg

    def test_json_default_target_scale(self):
        doc = TINY.to_json()
        doc.pop("target_scale")
        assert NetConfig.from_json(doc).target_scale == 1.0


class TestForward:
    def test_zero_head_gives_zero_output(self):
        model = init_model(TINY_POOL, seed=3)
        x = np.random.default_rng(0).uniform(size=(8, 8, 3))
        out = forward(model, x)
        assert out.total == 0.0
        assert predict_count(model, x) == 0.0

    def test_two_pools_quarter_resolution(self):
        model = init_model(tuned_config(width_scale=0.1), seed=0)
        x = np.zeros((64, 64, 3))
        out = forward(model, x)
        assert (out.height, out.width, out.channels) == (16, 16, 1)

    def test_matches_naive_oracle_no_pool(self):
        model = randomized_model(TINY, seed=5)
        x = np.random.default_rng(7).uniform(size=(8, 9, 3))
        got = forward(model, x).plane()
        expect = naive_forward_eval(model, x)[:, :, 0]
        assert np.allclose(got, expect, atol=1e-5)

    def test_matches_naive_oracle_with_pool(self):
        model = randomized_model(TINY_POOL, seed=6)
        x = np.random.default_rng(8).uniform(size=(10, 6, 3))
        got = forward(model, x).plane()
        expect = naive_forward_eval(model, x)[:, :, 0]
        assert got.shape == (5, 3)
        assert np.allclose(got, expect, atol=1e-5)

    def test_inference_clamps_training_does_not(self):
        model = randomized_model(TINY, seed=9)
        model.biases[-1][...] = -10.0  # push raw output negative
        x = np.zeros((6, 6, 3))
        assert forward(model, x, training=False).data.min() >= 0.0
        assert forward(model, x, training=True).data.min() < 0.0

    def test_rejects_wrong_channels_and_shape(self):
        model = init_model(TINY_POOL)
        with pytest.raises(ShapeError):
            forward(model, np.zeros((8, 8, 4)))
        with pytest.raises(ShapeError):
            forward(model, np.zeros((7, 8, 3)))  # not divisible by pool factor


class TestConvPaths:
    def test_shift_path_matches_im2col(self, monkeypatch):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 9, 8, 3))
        w = rng.normal(size=(5, 5, 3, 4))
        b = rng.normal(size=4)
        base = net._conv_forward(x, w, b)
        monkeypatch.setattr(net, "_SHIFT_PATH_COLS", 0)
        assert np.allclose(net._conv_forward(x, w, b), base, atol=1e-12)

    def test_shift_path_backward_matches(self, monkeypatch):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(2, 7, 6, 3))
        w = rng.normal(size=(3, 3, 3, 2))
        dout = rng.normal(size=(2, 7, 6, 2))
        dx0, dw0, db0 = net._conv_backward(x, w, dout)
        monkeypatch.setattr(net, "_SHIFT_PATH_COLS", 0)
        dx1, dw1, db1 = net._conv_backward(x, w, dout)
        assert np.allclose(dx0, dx1, atol=1e-12)
        assert np.allclose(dw0, dw1, atol=1e-12)
        assert np.allclose(db0, db1, atol=1e-12)


class TestBatchNorm:
    def test_batch_statistics_match_scale_shift(self):
        # Post-normalization activations have mean == shift, var == scale^2.
        model = randomized_model(TINY_POOL, seed=21)
        model.bn_scale[0][...] = 2.0
        model.bn_shift[0][...] = 0.5
        x = np.random.default_rng(3).uniform(size=(4, 8, 8, 3))
        _, caches, _ = net._forward_batch(model, x, training=True)
        xhat = caches[0][2][0]
        post = 2.0 * xhat + 0.5
        mean = post.mean(axis=(0, 1, 2))
        var = post.var(axis=(0, 1, 2))
        assert np.allclose(mean, 0.5, atol=1e-4)
        assert np.allclose(var, 4.0, atol=1e-4)


class TestLossAndGradients:
    def test_zero_loss_on_exact_target(self):
        model = randomized_model(TINY, seed=30)
        x = np.random.default_rng(1).uniform(size=(6, 6, 3))
        target = forward(model, x, training=True)
        loss, grads = loss_and_gradients(model, x, target)
        assert loss == pytest.approx(0.0, abs=1e-20)
        assert np.allclose(grads["layer1.weight"], 0.0)
        assert np.allclose(grads["layer1.bias"], 0.0)

    def test_quadratic_scaling(self):
        model = init_model(TINY, seed=4, dtype=np.float64)  # zero head: output 0
        x = np.random.default_rng(2).uniform(size=(6, 6, 3))
        t = np.random.default_rng(3).uniform(size=(6, 6, 1))
        loss1, _ = loss_and_gradients(model, x, t)
        loss2, _ = loss_and_gradients(model, x, 2.0 * t)
        assert loss2 == pytest.approx(4.0 * loss1, rel=1e-12)

    def test_rejects_target_shape_mismatch(self):
        model = init_model(TINY_POOL)
        x = np.zeros((8, 8, 3))
        with pytest.raises(ShapeError):
            loss_and_gradients(model, x, np.zeros((8, 8, 1)))

    def test_gradients_match_finite_differences(self):
        # Central differences at double precision; the relative-error floor
        # covers parameters whose true gradient is ~0 (conv bias feeding a
        # batch norm is cancelled by the mean subtraction).
        model = randomized_model(TINY_POOL, seed=40)
        rng = np.random.default_rng(41)
        x = rng.uniform(size=(6, 6, 3))
        t = rng.uniform(size=(3, 3, 1))
        _, grads = loss_and_gradients(model, x, t)
        eps = 1e-4
        worst = 0.0
        for name, p in model.named_params():
            g = grads[name]
            flat = p.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + eps
                lp, _ = loss_and_gradients(model, x, t)
                flat[idx] = orig - eps
                lm, _ = loss_and_gradients(model, x, t)
                flat[idx] = orig
                fd = (lp - lm) / (2 * eps)
                gval = g.reshape(-1)[idx]
                rel = abs(fd - gval) / max(abs(fd), abs(gval), 1e-6)
                worst = max(worst, rel)
        assert worst <= 1e-3


class TestTrain:
    @staticmethod
    def tiny_dataset(n=6, seed=0):
        rng = np.random.default_rng(seed)
        data = []
        for _ in range(n):
            x = rng.uniform(size=(8, 8, 3))
            t = rng.uniform(0.0, 0.1, size=(4, 4, 1))
            data.append((x, t))
        return data

    def test_deterministic_given_seed(self):
        cfg = NetConfig(dims=(3, 1), kernels=(3, 3), pool_before=frozenset({1}))
        data = self.tiny_dataset()
        a = train(init_model(cfg, seed=1), data, epochs=2, lr=1e-2, seed=5)
        b = train(init_model(cfg, seed=1), data, epochs=2, lr=1e-2, seed=5)
        for (name, pa), (_, pb) in zip(a.named_params(), b.named_params()):
            assert np.array_equal(pa, pb), name
        assert a.loss_trace == b.loss_trace

    def test_loss_trace_and_counters(self):
        cfg = NetConfig(dims=(2, 1), kernels=(3, 1), pool_before=frozenset({1}))
        data = self.tiny_dataset(n=5)
        model = train(init_model(cfg, seed=0), data, epochs=3, batch_size=2, seed=0)
        assert model.step == 3 * 3  # ceil(5/2) batches per epoch
        assert len(model.loss_trace) == model.step
        assert all(np.isfinite(v) for v in model.loss_trace)

    def test_learns_constant_target(self):
        # Zero targets pull the initially-zero head toward staying at zero.
        cfg = NetConfig(dims=(2, 1), kernels=(3, 1), pool_before=frozenset({1}))
        data = [(x, np.zeros((4, 4, 1))) for x, _ in self.tiny_dataset(n=4)]
        model = train(init_model(cfg, seed=2), data, epochs=5, lr=1e-2, seed=0)
        assert model.loss_trace[-1] <= model.loss_trace[0] + 1e-12

    def test_updates_running_bn_stats(self):
        cfg = NetConfig(dims=(2, 1), kernels=(3, 1), pool_before=frozenset({1}))
        model = init_model(cfg, seed=0)
        trained = train(model, self.tiny_dataset(n=4), epochs=1, seed=0)
        assert not np.allclose(trained.bn_mean[0], 0.0)
        assert not np.array_equal(trained.bn_var[0], np.ones_like(trained.bn_var[0]))
        # The input model is untouched.
        assert np.allclose(model.bn_mean[0], 0.0)

    def test_rejects_empty_dataset(self):
        with pytest.raises(ParameterError):
            train(init_model(TINY), [], epochs=1)

    def test_lr_decay_inactive_within_first_epoch(self):
        cfg = NetConfig(dims=(2, 1), kernels=(3, 1), pool_before=frozenset({1}))
        data = self.tiny_dataset(n=4)
        a = train(init_model(cfg, seed=3), data, epochs=1, lr=1e-2, seed=0)
        b = train(init_model(cfg, seed=3), data, epochs=1, lr=1e-2, seed=0, lr_decay=0.5)
        for (name, pa), (_, pb) in zip(a.named_params(), b.named_params()):
            assert np.array_equal(pa, pb), name

    def test_lr_decay_changes_later_epochs(self):
        cfg = NetConfig(dims=(2, 1), kernels=(3, 1), pool_before=frozenset({1}))
        data = self.tiny_dataset(n=4)
        a = train(init_model(cfg, seed=3), data, epochs=3, lr=1e-2, seed=0)
        b = train(init_model(cfg, seed=3), data, epochs=3, lr=1e-2, seed=0, lr_decay=0.5)
        assert any(
            not np.array_equal(pa, pb)
            for (_, pa), (_, pb) in zip(a.named_params(), b.named_params())
        )

    def test_lr_decay_must_lie_in_unit_interval(self):
        data = self.tiny_dataset(n=2)
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ParameterError):
                train(init_model(TINY), data, epochs=1, lr_decay=bad)

    def test_divergence_raises_training_error(self):
        cfg = NetConfig(dims=(2, 1), kernels=(3, 1), pool_before=frozenset({1}))
        data = self.tiny_dataset(n=4)
        with pytest.raises(TrainingError):
            train(init_model(cfg, seed=0), data, epochs=50, lr=1e12, seed=0)


class TestPredict:
    def test_count_descaled_by_target_scale(self):
        # Single 1x1-kernel layer with zero weights: output == bias everywhere.
        cfg = NetConfig(dims=(1,), kernels=(1,), input_channels=3, target_scale=100.0)
        model = init_model(cfg, seed=0, dtype=np.float64)
        model.biases[0][...] = 2.0
        x = np.zeros((4, 5, 3))
        assert predict_count(model, x) == pytest.approx(4 * 5 * 2.0 / 100.0)
        dens = predict_density(model, x)
        assert dens.total == pytest.approx(4 * 5 * 2.0 / 100.0)

    def test_density_pads_odd_sizes(self):
        cfg = NetConfig(
            dims=(2, 1), kernels=(3, 1), pool_before=frozenset({0, 1}), input_channels=3
        )
        model = randomized_model(cfg, seed=50)
        x = np.random.default_rng(4).uniform(size=(9, 6, 3))
        out = predict_density(model, x)
        # ceil(9/4) x ceil(6/4) output cells.
        assert (out.height, out.width) == (3, 2)
        assert out.data.min() >= 0.0


class TestInputStack:
    def test_channels_assembled_in_order(self):
        rgb = np.full((4, 4, 3), 255.0)
        det = np.full((4, 4), 0.25)
        x = input_stack(rgb, thermal=0.5, detection=det)
        assert x.shape == (4, 4, 5)
        assert np.all(x[:, :, :3] == 1.0)
        assert np.all(x[:, :, 3] == 0.5)
        assert np.all(x[:, :, 4] == 0.25)

    def test_rgb_only(self):
        x = input_stack(np.zeros((4, 4, 3)))
        assert x.shape == (4, 4, 3)

    def test_rejects_mismatched_detection(self):
        with pytest.raises(ShapeError):
            input_stack(np.zeros((4, 4, 3)), detection=np.zeros((8, 8)))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = NetConfig(
            dims=(3, 1), kernels=(3, 1), pool_before=frozenset({1}),
            input_channels=4, target_scale=100.0,
        )
        model = randomized_model(cfg, seed=60)
        model.step = 17
        path = tmp_path / "model.pcnn"
        save_checkpoint(path, model)
        back = load_checkpoint(path)
        assert back.config == cfg
        assert back.step == 17
        assert back.seed == model.seed
        for (name, pa), (_, pb) in zip(model.named_params(), back.named_params()):
            assert np.array_equal(pa.astype(np.float32), pb), name
        for l in range(cfg.n_layers - 1):
            assert np.array_equal(model.bn_mean[l].astype(np.float32), back.bn_mean[l])
            assert np.array_equal(model.bn_var[l].astype(np.float32), back.bn_var[l])

    def test_predictions_survive_round_trip(self, tmp_path):
        cfg = NetConfig(dims=(2, 1), kernels=(3, 1), pool_before=frozenset({1}))
        model = randomized_model(cfg, seed=61)
        path = tmp_path / "model.pcnn"
        save_checkpoint(path, model)
        back = load_checkpoint(path, dtype=np.float64)
        x = np.random.default_rng(5).uniform(size=(8, 8, 3))
        a = forward(model, x).data.astype(np.float32)
        b = forward(back, x).data.astype(np.float32)
        assert np.allclose(a, b, atol=1e-6)

    def test_rejects_corrupted_files(self, tmp_path):
        model = init_model(TINY, seed=0)
        path = tmp_path / "model.pcnn"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        bad = tmp_path / "bad.pcnn"
        bad.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FormatError):
            load_checkpoint(bad)
        bad.write_bytes(raw[:-4])
        with pytest.raises(FormatError):
            load_checkpoint(bad)
        bad.write_bytes(raw + b"\x00\x00\x00\x00")
        with pytest.raises(FormatError):
            load_checkpoint(bad)
        bad.write_bytes(raw[:4] + b"\x09\x00\x00\x00" + raw[8:])
        with pytest.raises(FormatError):
            load_checkpoint(bad)


def test_pooled_target_pipeline_count_identity():
    # sum_pool factor 4 keeps the count a density target carries.
    rng = np.random.default_rng(8)
    target = RasterGrid.from_array(rng.uniform(size=(16, 16)))
    pooled = sum_pool(target, 4)
    assert pooled.total == pytest.approx(target.total, abs=1e-12)
