"""Residual network: shapes, parameter accounting, gradients, checkpoints."""

import numpy as np
import pytest

from das.net import (
    ModelConfig,
    backward,
    build_model,
    forward,
    load_checkpoint,
    model_summary,
    predict_proba,
    save_checkpoint,
    softmax,
    softmax_cross_entropy,
)


def closed_form_param_count(depth, widths=(16, 32, 64), in_channels=1, num_classes=2):
    """Independent layer-formula count: conv = c_out*c_in*k^2 (no bias),
    batch norm = 2*c, fc = c*num_classes + num_classes."""
    n = (depth - 2) // 6
    w1, w2, w3 = widths
    total = w1 * in_channels * 9 + 2 * w1  # stem
    in_ch = w1
    for width in (w1, w2, w3):
        for b in range(n):
            total += width * in_ch * 9 + 2 * width     # conv1 + bn1
            total += width * width * 9 + 2 * width     # conv2 + bn2
            if in_ch != width or (width != w1 and b == 0):
                total += width * in_ch + 2 * width     # projection + bn
            in_ch = width
        in_ch = width
    total += w3 * num_classes + num_classes
    return total


TINY = dict(depth=8, stage_widths=(2, 4, 8), input_size=8, seed=7, dtype="float64")


class TestArchitecture:
    def test_depth8_layer_params(self):
        rows = model_summary(build_model(ModelConfig(depth=8, input_size=200)))
        params = [p for _, _, p in rows]
        assert params[0] == 144          # stem conv
        assert params.count(2304) == 2   # stage-1 block convs
        assert 4608 in params and 512 in params    # stage-2 first conv + projection
        assert 18432 in params and 2048 in params  # stage-3 first conv + projection
        assert params[-1] == 130         # fully connected
        assert sum(params) == 77234

    def test_stage_output_shapes(self):
        rows = model_summary(build_model(ModelConfig(depth=8, input_size=200)))
        shapes = [s for _, s, _ in rows]
        assert (-1, 16, 200, 200) in shapes
        assert (-1, 32, 100, 100) in shapes
        assert (-1, 64, 50, 50) in shapes
        assert shapes[-2] == (-1, 64, 1, 1)
        assert shapes[-1] == (-1, 2)

    @pytest.mark.parametrize("depth", [8, 14, 20])
    def test_param_count_matches_closed_form(self, depth):
        model = build_model(ModelConfig(depth=depth, input_size=50))
        assert model.n_params() == closed_form_param_count(depth)
        assert sum(p for _, _, p in model_summary(model)) == model.n_params()

    def test_depth_to_blocks(self):
        for depth, n in [(8, 1), (14, 2), (20, 3)]:
            model = build_model(ModelConfig(depth=depth, input_size=50))
            assert len(model.blocks) == 3 * n

    def test_unsupported_depth(self):
        with pytest.raises(ValueError, match="depth"):
            ModelConfig(depth=10)

    def test_odd_size_stride_follows_ceil(self):
        rows = model_summary(build_model(ModelConfig(depth=8, input_size=50)))
        shapes = [s for _, s, _ in rows]
        assert (-1, 32, 25, 25) in shapes
        assert (-1, 64, 13, 13) in shapes

    def test_init_deterministic(self):
        a = build_model(ModelConfig(**TINY))
        b = build_model(ModelConfig(**TINY))
        for name in a.param_names():
            np.testing.assert_array_equal(a.params[name], b.params[name])


class TestForward:
    def test_logit_shape(self, rng):
        model = build_model(ModelConfig(depth=8, input_size=50, seed=1))
        x = rng.random((5, 1, 50, 50)).astype(np.float32)
        assert forward(model, x, mode="eval").shape == (5, 2)

    def test_eval_deterministic_and_chunk_stable(self, rng):
        model = build_model(ModelConfig(depth=8, input_size=50, seed=1))
        x = rng.random((7, 1, 50, 50)).astype(np.float32)
        a = forward(model, x, mode="eval")
        b = forward(model, x, mode="eval")
        np.testing.assert_array_equal(a, b)
        # a different chunk size changes float32 GEMM blocking, so only
        # near-equality is promised across chunkings
        c = forward(model, x, mode="eval", eval_chunk=3)
        np.testing.assert_allclose(a, c, atol=1e-4)

    def test_zero_fc_gives_uniform_probabilities(self, rng):
        model = build_model(ModelConfig(depth=8, input_size=50, seed=1))
        model.params["fc.w"][:] = 0.0
        model.params["fc.b"][:] = 0.0
        x = rng.random((4, 1, 50, 50)).astype(np.float32)
        logits = forward(model, x, mode="eval")
        assert (logits == 0).all()
        np.testing.assert_allclose(softmax(logits), 0.5)
        np.testing.assert_allclose(predict_proba(model, x), 0.5)

    def test_shape_mismatch_rejected(self, rng):
        model = build_model(ModelConfig(depth=8, input_size=50))
        with pytest.raises(ValueError, match="shape"):
            forward(model, rng.random((2, 1, 40, 40)), mode="eval")
        with pytest.raises(ValueError, match="mode"):
            forward(model, rng.random((2, 1, 50, 50)), mode="predict")

    def test_eval_mode_is_pure(self, rng):
        model = build_model(ModelConfig(**TINY))
        params_before = {k: v.copy() for k, v in model.params.items()}
        buffers_before = {k: v.copy() for k, v in model.buffers.items()}
        forward(model, rng.random((4, 1, 8, 8)), mode="eval")
        for k, v in model.params.items():
            np.testing.assert_array_equal(v, params_before[k])
        for k, v in model.buffers.items():
            np.testing.assert_array_equal(v, buffers_before[k])

    def test_train_mode_updates_running_stats(self, rng):
        model = build_model(ModelConfig(**TINY))
        before = model.buffers["stem.bn.running_mean"].copy()
        forward(model, rng.random((4, 1, 8, 8)), mode="train")
        assert not np.array_equal(model.buffers["stem.bn.running_mean"], before)

    def test_freeze_bn_keeps_running_stats(self, rng):
        model = build_model(ModelConfig(**TINY))
        before = {k: v.copy() for k, v in model.buffers.items()}
        forward(model, rng.random((4, 1, 8, 8)), mode="train", freeze_bn=True)
        for k, v in model.buffers.items():
            np.testing.assert_array_equal(v, before[k])


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_loss(self):
        loss, grad = softmax_cross_entropy(np.zeros((1, 2)), np.array([0]))
        assert loss == pytest.approx(np.log(2.0), rel=1e-12)
        np.testing.assert_allclose(grad, [[-0.5, 0.5]])

    def test_extreme_logits_stable(self):
        loss, grad = softmax_cross_entropy(np.array([[30.0, -30.0]]), np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.isfinite(grad).all()

    def test_gradient_matches_finite_differences(self, rng):
        logits = rng.normal(size=(4, 2))
        labels = np.array([0, 1, 1, 0])
        _, grad = softmax_cross_entropy(logits, labels)
        h = 1e-6
        for i in range(4):
            for j in range(2):
                lp = logits.copy(); lp[i, j] += h
                lm = logits.copy(); lm[i, j] -= h
                fd = (softmax_cross_entropy(lp, labels)[0]
                      - softmax_cross_entropy(lm, labels)[0]) / (2 * h)
                assert grad[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-10)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="range"):
            softmax_cross_entropy(np.zeros((2, 2)), np.array([0, 2]))

    def test_probabilities_sum_to_one(self, rng):
        p = softmax(rng.normal(size=(10, 2)) * 10.0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert (p >= 0).all()


class TestBackward:
    def test_requires_cached_forward(self, rng):
        model = build_model(ModelConfig(**TINY))
        with pytest.raises(RuntimeError, match="cached"):
            backward(model, np.zeros((2, 2)))

    def test_zero_upstream_zero_grads(self, rng):
        model = build_model(ModelConfig(**TINY))
        forward(model, rng.random((3, 1, 8, 8)), mode="train")
        grads = backward(model, np.zeros((3, 2)))
        for name, g in grads.items():
            assert (g == 0).all(), name

    def test_duplicated_sample_contributions_equal(self, rng):
        # a batch of one sample vs the same sample twice: batch statistics
        # and the mean loss are identical, so gradients must match
        model = build_model(ModelConfig(**TINY))
        x1 = rng.random((1, 1, 8, 8))
        y1 = np.array([1])
        logits = forward(model, x1, mode="train")
        _, dl = softmax_cross_entropy(logits, y1)
        g1 = backward(model, dl)
        x2 = np.repeat(x1, 2, axis=0)
        y2 = np.array([1, 1])
        logits2 = forward(model, x2, mode="train")
        _, dl2 = softmax_cross_entropy(logits2, y2)
        g2 = backward(model, dl2)
        for name in g1:
            np.testing.assert_allclose(g1[name], g2[name], rtol=1e-9, atol=1e-12)

    def test_gradcheck_sampled_params(self, rng):
        # full every-parameter sweep runs in the acceptance suite
        model = build_model(ModelConfig(**TINY))
        x = rng.random((2, 1, 8, 8))
        y = np.array([0, 1])

        def loss_fn():
            logits = forward(model, x, mode="train")
            return softmax_cross_entropy(logits, y)[0]

        logits = forward(model, x, mode="train")
        _, dl = softmax_cross_entropy(logits, y)
        grads = backward(model, dl)
        h = 1e-5
        check_rng = np.random.default_rng(0)
        for name in ["stem.conv.w", "s1.b1.conv2.w", "s2.b1.proj.w",
                     "s2.b1.bn1.gamma", "s3.b1.bn2.beta", "fc.w", "fc.b"]:
            flat = model.params[name].reshape(-1)
            g = grads[name].reshape(-1)
            for i in check_rng.choice(flat.size, size=min(5, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                lp = loss_fn()
                flat[i] = orig - h
                lm = loss_fn()
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                denom = max(abs(g[i]), abs(fd), 1e-7)
                assert abs(g[i] - fd) / denom < 1e-3, f"{name}[{i}]"


class TestCheckpoint:
    def test_roundtrip_bit_exact_eval(self, tmp_path, rng):
        model = build_model(ModelConfig(depth=8, input_size=50, seed=2))
        x = rng.random((3, 1, 50, 50)).astype(np.float32)
        forward(model, x, mode="train")  # move running stats off init
        expected = forward(model, x, mode="eval")
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, epoch=3, history={"val_acc": [0.9]})
        back = load_checkpoint(path)
        np.testing.assert_array_equal(forward(back, x, mode="eval"), expected)
        assert back.epoch == 3
        assert back.history == {"val_acc": [0.9]}

    def test_config_mismatch_rejected(self, tmp_path):
        model = build_model(ModelConfig(depth=8, input_size=50, num_classes=2))
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        load_checkpoint(path, ModelConfig(depth=8, input_size=50, num_classes=2))
        with pytest.raises(ValueError, match="mismatch"):
            load_checkpoint(path, ModelConfig(depth=8, input_size=50, num_classes=3))

    def test_byte_size_formula(self, tmp_path):
        import struct
        model = build_model(ModelConfig(depth=8, input_size=50))
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        (header_len,) = struct.unpack("<Q", raw[8:16])
        bn_channels = sum(
            model.buffers[name].size for name in model.buffer_names()
            if name.endswith("running_mean")
        )
        expected = 16 + header_len + 4 * (model.n_params() + 2 * bn_channels)
        assert len(raw) == expected

    def test_corrupt_magic_rejected(self, tmp_path):
        model = build_model(ModelConfig(**TINY))
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="checkpoint"):
            load_checkpoint(path)
