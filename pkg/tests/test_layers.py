"""Static and dynamic masked convolution layers, and mask folding."""

import math

import numpy as np
import pytest

from gmconv import masks
from gmconv.layers import (
    Conv2dLayer,
    DynamicGMConvLayer,
    DynamicSigmaModule,
    StaticGMConvLayer,
    fold_mask,
    softplus_inverse,
)
from gmconv.tensor import (
    GradTape,
    Tensor,
    conv2d,
    conv2d_reference,
    mul,
    softmax_cross_entropy,
    tsum,
)
from util import num_grad


def make_static(rng, o=2, c=3, k=3, sigma=5.0, stride=1, padding=1):
    w = Tensor(rng.normal(size=(o, c, k, k)), requires_grad=True)
    b = Tensor(rng.normal(size=o), requires_grad=True)
    return StaticGMConvLayer(w, b, sigma=sigma, stride=stride, padding=padding)


def make_dynamic(rng, o=2, c=3, k=3, pattern="sigma_pair", stride=1, padding=1):
    w = Tensor(rng.normal(size=(o, c, k, k)), requires_grad=True)
    b = Tensor(rng.normal(size=o), requires_grad=True)
    mod = DynamicSigmaModule(c, pattern=pattern, rng=rng)
    return DynamicGMConvLayer(w, b, mod, stride=stride, padding=padding)


class TestMaskedKernelIdentity:
    def test_mask_commutes_between_kernel_and_patch(self):
        """Dotting a kernel with a masked patch equals dotting the masked
        kernel with the raw patch, for random vectors."""
        rng = np.random.default_rng(0)
        for _ in range(20):
            size = int(rng.integers(1, 60))
            w = rng.normal(size=size)
            m = rng.uniform(0.01, 1.0, size=size)
            i = rng.normal(size=size)
            lhs = np.dot(w, m * i)
            rhs = np.dot(w * m, i)
            assert abs(lhs - rhs) < 1e-12


class TestStaticForward:
    def test_all_ones_case_sums_the_mask(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        layer = StaticGMConvLayer(
            Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), sigma=1.0, padding=0
        )
        out = layer.forward(x)
        want = 1.0 + 4.0 * math.exp(-0.5) + 4.0 * math.exp(-1.0)
        np.testing.assert_allclose(out.data[0, 0, 0, 0], want, rtol=1e-12)
        np.testing.assert_allclose(out.data[0, 0, 0, 0], 4.8976404, rtol=1e-7)

    def test_flat_limit_equals_plain_conv(self):
        rng = np.random.default_rng(1)
        layer = make_static(rng, sigma=masks.SIGMA_MAX)
        x = Tensor(rng.normal(size=(2, 3, 8, 8)))
        got = layer.forward(x).data
        want = conv2d(x, layer.weight, layer.bias, 1, 1).data
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)

    def test_delta_limit_equals_center_only_conv(self):
        """At the lower clamp with odd K only the center tap survives, so
        the layer behaves as a 1x1 convolution built from each kernel's
        center coefficient."""
        rng = np.random.default_rng(2)
        layer = make_static(rng, o=4, c=2, k=3, sigma=masks.SIGMA_MIN)
        x = Tensor(rng.normal(size=(2, 2, 6, 6)))
        got = layer.forward(x).data
        center = layer.weight.data[:, :, 1:2, 1:2]
        # the center tap never reads the padding ring, so the equality
        # holds at every output position, borders included
        want = conv2d(x, Tensor(center), layer.bias, 1, 0).data
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12)

    def test_sigma_stored_raw_evaluated_clamped_and_signless(self):
        rng = np.random.default_rng(3)
        layer = make_static(rng, sigma=-2.5)
        assert float(layer.sigma.data) == -2.5
        x = Tensor(rng.normal(size=(1, 3, 5, 5)))
        twin = StaticGMConvLayer(layer.weight, layer.bias, sigma=2.5, padding=1)
        np.testing.assert_array_equal(layer.forward(x).data, twin.forward(x).data)

    def test_matches_reference_conv_of_masked_weights(self):
        rng = np.random.default_rng(4)
        layer = make_static(rng, o=3, c=2, k=5, sigma=1.7, stride=2, padding=2)
        x = Tensor(rng.normal(size=(2, 2, 9, 9)))
        got = layer.forward(x).data
        wm = layer.weight.data * masks.circular_values(1.7, 5)
        want = conv2d_reference(x.data, wm, layer.bias.data, stride=2, padding=2)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_parameter_accounting_plus_one(self):
        rng = np.random.default_rng(5)
        layer = make_static(rng, o=4, c=3, k=3)
        plain = Conv2dLayer(layer.weight, layer.bias, 1, 1)
        n_static = sum(t.data.size for _, t in layer.param_items())
        n_plain = sum(t.data.size for _, t in plain.param_items())
        assert n_static == n_plain + 1


class TestStaticGradients:
    def test_all_params_match_finite_differences(self):
        rng = np.random.default_rng(6)
        layer = make_static(rng, o=2, c=2, k=3, sigma=1.3)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)))
        r = rng.normal(size=(2, 2, 5, 5))

        def loss_value(_arr=None):
            return float(np.sum(layer.forward(x).data * r))

        tape = GradTape()
        loss = tsum(mul(layer.forward(x, tape), Tensor(r), tape), tape)
        tape.backward(loss)
        for name, t in layer.param_items():
            want = num_grad(loss_value, t.data, h=1e-5)
            np.testing.assert_allclose(
                t.grad, want, rtol=1e-4, atol=1e-6, err_msg=f"param {name}"
            )

    def test_sigma_grad_zero_for_zero_weights(self):
        layer = StaticGMConvLayer(
            Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.zeros(2)), sigma=1.0, padding=1
        )
        x = Tensor(np.random.default_rng(7).normal(size=(1, 3, 5, 5)))
        tape = GradTape()
        loss = tsum(layer.forward(x, tape), tape)
        tape.backward(loss)
        assert float(layer.sigma.grad) == 0.0

    def test_sigma_grad_zero_at_clamp_boundary(self):
        rng = np.random.default_rng(8)
        for sigma in (masks.SIGMA_MIN, masks.SIGMA_MAX, 1e9):
            layer = make_static(rng, sigma=sigma)
            x = Tensor(rng.normal(size=(1, 3, 5, 5)))
            tape = GradTape()
            loss = tsum(layer.forward(x, tape), tape)
            tape.backward(loss)
            assert float(layer.sigma.grad) == 0.0

    def test_sigma_grad_random_case_fd(self):
        rng = np.random.default_rng(9)
        layer = StaticGMConvLayer(
            Tensor(rng.normal(size=(1, 1, 3, 3))), Tensor(np.zeros(1)), sigma=0.9, padding=0
        )
        x = Tensor(rng.normal(size=(1, 1, 3, 3)))

        def loss_at(sig):
            twin = StaticGMConvLayer(layer.weight, layer.bias, sigma=float(sig), padding=0)
            return float(twin.forward(x).data.sum())

        tape = GradTape()
        tape.backward(tsum(layer.forward(x, tape), tape))
        h = 1e-5
        want = (loss_at(0.9 + h) - loss_at(0.9 - h)) / (2 * h)
        np.testing.assert_allclose(float(layer.sigma.grad), want, rtol=1e-4)


class TestDynamicSigmaModule:
    def test_dimensions_for_c64(self):
        mod = DynamicSigmaModule(64, r=4.0 / 3.0, pattern="sigma_pair",
                                 rng=np.random.default_rng(0))
        assert mod.hidden == 96
        assert mod.w0.data.shape == (96, 128)
        assert mod.w1.data.shape == (2, 96)
        assert mod.b1.data.shape == (2,)

    def test_output_arity_per_pattern(self):
        rng = np.random.default_rng(1)
        for pattern, arity in (("sigma", 1), ("sigma_pair", 2), ("sigma_ratio", 2)):
            mod = DynamicSigmaModule(8, pattern=pattern, rng=rng)
            assert mod.arity == arity
            assert mod.w1.data.shape[0] == arity
            assert mod.b1.data.shape == (arity,)

    def test_bias_only_init_predicts_sigma_init(self):
        """Zeroed bottleneck weights leave only B1, which is initialized
        to hit (sigma_init, ratio 1) exactly; every input then maps to
        sigma1 = sigma2 = sigma_init."""
        rng = np.random.default_rng(2)
        for pattern in ("sigma", "sigma_pair", "sigma_ratio"):
            mod = DynamicSigmaModule(3, pattern=pattern, sigma_init=5.0, rng=rng)
            mod.w0.data[:] = 0.0
            mod.w1.data[:] = 0.0
            x = Tensor(rng.normal(size=(4, 3, 6, 6)))
            s1, s2 = mod.predict(x)
            np.testing.assert_allclose(s1.data, np.full(4, 5.0), rtol=1e-12)
            np.testing.assert_allclose(s2.data, np.full(4, 5.0), rtol=1e-12)

    def test_zero_descriptor_hits_init_without_zeroing(self):
        mod = DynamicSigmaModule(3, pattern="sigma_ratio", sigma_init=7.0,
                                 rng=np.random.default_rng(3))
        x = Tensor(np.zeros((2, 3, 4, 4)))
        s1, s2 = mod.predict(x)
        np.testing.assert_allclose(s1.data, np.full(2, 7.0), rtol=1e-12)
        np.testing.assert_allclose(s2.data, np.full(2, 7.0), rtol=1e-12)

    def test_distinct_samples_get_distinct_sigmas(self):
        rng = np.random.default_rng(4)
        mod = DynamicSigmaModule(3, pattern="sigma_pair", rng=rng)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)) * np.array([1.0, 10.0])[:, None, None, None])
        s1, _ = mod.predict(x)
        assert s1.data[0] != s1.data[1]

    def test_predictions_always_positive(self):
        rng = np.random.default_rng(5)
        mod = DynamicSigmaModule(2, pattern="sigma_pair", rng=rng)
        x = Tensor(rng.normal(size=(8, 2, 5, 5)) * 50.0)
        s1, s2 = mod.predict(x)
        assert np.all(s1.data > 0.0)
        assert np.all(s2.data > 0.0)

    def test_softplus_inverse_roundtrip(self):
        for y in (0.9, 1.0, 4.9, 9.9):
            np.testing.assert_allclose(
                np.logaddexp(0.0, softplus_inverse(y)), y, rtol=1e-12
            )
        with pytest.raises(ValueError):
            softplus_inverse(0.0)

    def test_validation(self):
        rng = np.random.default_rng(6)
        with pytest.raises(ValueError):
            DynamicSigmaModule(3, pattern="sigmas", rng=rng)
        with pytest.raises(ValueError):
            DynamicSigmaModule(0, rng=rng)
        with pytest.raises(ValueError):
            DynamicSigmaModule(3, r=-1.0, rng=rng)
        with pytest.raises(ValueError):
            DynamicSigmaModule(3, r=100.0, rng=rng)  # no hidden units left
        mod = DynamicSigmaModule(3, rng=rng)
        with pytest.raises(ValueError):
            mod.predict(Tensor(np.zeros((1, 4, 5, 5))))


class TestDynamicForward:
    def test_repeated_sample_gives_identical_slices(self):
        rng = np.random.default_rng(7)
        layer = make_dynamic(rng)
        one = rng.normal(size=(1, 3, 6, 6))
        x = Tensor(np.repeat(one, 5, axis=0))
        out = layer.forward(x).data
        for n in range(1, 5):
            np.testing.assert_array_equal(out[n], out[0])

    def test_forced_flat_limit_equals_plain_conv(self):
        """Zero the bottleneck and push B1 so softplus lands at the upper
        clamp: the elliptic mask flattens to ones and the layer matches
        an ordinary convolution."""
        rng = np.random.default_rng(8)
        layer = make_dynamic(rng, pattern="sigma_pair")
        layer.sigma_module.w0.data[:] = 0.0
        layer.sigma_module.w1.data[:] = 0.0
        layer.sigma_module.b1.data[:] = 2e6  # softplus(2e6) = 2e6 in f64
        x = Tensor(rng.normal(size=(3, 3, 7, 7)))
        got = layer.forward(x).data
        want = conv2d(x, layer.weight, layer.bias, 1, 1).data
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)

    def test_batched_equals_per_sample_loop(self):
        """Normative semantics: loop over samples, mask each one's kernel,
        run the direct-loop convolution. The batched layer must agree to
        1e-12."""
        rng = np.random.default_rng(9)
        layer = make_dynamic(rng, o=5, c=3, k=3)
        x = Tensor(rng.normal(size=(4, 3, 8, 8)))
        got = layer.forward(x).data
        s1, s2 = layer.sigma_module.predict(x)
        for n in range(4):
            m = masks.elliptic_values(float(s1.data[n]), float(s2.data[n]), 3)
            want = conv2d_reference(
                x.data[n : n + 1], layer.weight.data * m, layer.bias.data, 1, 1
            )
            assert np.max(np.abs(got[n] - want[0])) < 1e-12

    def test_pattern_sigma_gives_circular_masks(self):
        rng = np.random.default_rng(10)
        layer = make_dynamic(rng, pattern="sigma")
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        s1, s2 = layer.sigma_module.predict(x)
        np.testing.assert_array_equal(s1.data, s2.data)

    def test_sigma_ratio_composes(self):
        rng = np.random.default_rng(11)
        mod = DynamicSigmaModule(3, pattern="sigma_ratio", rng=rng)
        x = Tensor(rng.normal(size=(3, 3, 5, 5)))
        s1, s2 = mod.predict(x)
        # ratio path: sigma2 / sigma1 equals the positivity-mapped second head
        ratios = s2.data / s1.data
        assert np.all(ratios > 0.0)
        assert not np.allclose(ratios, 1.0)


class TestDynamicGradients:
    @pytest.mark.parametrize("pattern", ["sigma", "sigma_pair", "sigma_ratio"])
    def test_all_params_match_finite_differences(self, pattern):
        rng = np.random.default_rng(12)
        layer = make_dynamic(rng, o=2, c=2, k=3, pattern=pattern)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)))
        r = rng.normal(size=(2, 2, 5, 5))

        def loss_value(_arr=None):
            return float(np.sum(layer.forward(x).data * r))

        tape = GradTape()
        loss = tsum(mul(layer.forward(x, tape), Tensor(r), tape), tape)
        tape.backward(loss)
        for name, t in layer.param_items():
            want = num_grad(loss_value, t.data, h=1e-5)
            np.testing.assert_allclose(
                t.grad, want, rtol=1e-4, atol=1e-6, err_msg=f"param {name} ({pattern})"
            )

    def test_input_grad_matches_fd(self):
        """The input feeds both the descriptor branch and the convolution;
        its adjoint must be the sum of the two paths."""
        rng = np.random.default_rng(13)
        layer = make_dynamic(rng, o=2, c=2, k=3, pattern="sigma_pair")
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        r = rng.normal(size=(1, 2, 4, 4))

        def loss_value(_arr=None):
            return float(np.sum(layer.forward(x).data * r))

        tape = GradTape()
        loss = tsum(mul(layer.forward(x, tape), Tensor(r), tape), tape)
        tape.backward(loss)
        want = num_grad(loss_value, x.data, h=1e-5)
        np.testing.assert_allclose(x.grad, want, rtol=1e-3, atol=1e-6)

    def test_trains_against_loss(self):
        rng = np.random.default_rng(14)
        layer = make_dynamic(rng, o=3, c=2, k=3)
        x = Tensor(rng.normal(size=(4, 2, 6, 6)))
        labels = np.array([0, 1, 2, 0])
        tape = GradTape()
        out = layer.forward(x, tape)
        pooled_data = out.data.mean(axis=(2, 3))
        # direct head: ensure gradients reach every parameter
        from gmconv.tensor import global_pool

        logits = global_pool(out, "avg", tape)
        loss = softmax_cross_entropy(logits, labels, tape)
        tape.backward(loss)
        assert logits.data.shape == pooled_data.shape
        for name, t in layer.param_items():
            assert t.grad is not None, name
            assert np.all(np.isfinite(t.grad)), name


class TestFolding:
    def test_fold_reproduces_outputs_exactly(self):
        rng = np.random.default_rng(15)
        for k in (3, 5, 11):
            layer = make_static(rng, o=2, c=2, k=k, sigma=float(rng.uniform(0.5, 8.0)),
                                padding=k // 2)
            x = Tensor(rng.normal(size=(2, 2, 12, 12)))
            live = layer.forward(x).data
            layer.folded = False  # reuse the same layer for the fold
            plain = fold_mask(layer)
            np.testing.assert_array_equal(plain.forward(x).data, live)

    def test_fold_at_flat_limit_keeps_weights(self):
        rng = np.random.default_rng(16)
        layer = make_static(rng, sigma=masks.SIGMA_MAX)
        plain = fold_mask(layer)
        np.testing.assert_allclose(plain.weight.data, layer.weight.data, rtol=1e-9)

    def test_fold_consumes_sigma(self):
        rng = np.random.default_rng(17)
        layer = make_static(rng)
        fold_mask(layer)
        with pytest.raises(RuntimeError):
            fold_mask(layer)
        with pytest.raises(RuntimeError):
            layer.forward(Tensor(np.zeros((1, 3, 5, 5))))

    def test_fold_rejects_dynamic(self):
        rng = np.random.default_rng(18)
        layer = make_dynamic(rng)
        with pytest.raises(TypeError):
            fold_mask(layer)

    def test_fold_rejects_plain(self):
        rng = np.random.default_rng(19)
        plain = Conv2dLayer(Tensor(rng.normal(size=(2, 3, 3, 3))), Tensor(np.zeros(2)))
        with pytest.raises(TypeError):
            fold_mask(plain)


class TestParameterAccounting:
    def test_dynamic_adds_module_params(self):
        rng = np.random.default_rng(20)
        layer = make_dynamic(rng, o=4, c=8, k=3)
        plain_count = layer.weight.data.size + layer.bias.data.size
        mod = layer.sigma_module
        extra = mod.w0.data.size + mod.w1.data.size + mod.b1.data.size
        total = sum(t.data.size for _, t in layer.param_items())
        assert total == plain_count + extra

    def test_decay_sets_exclude_geometry(self):
        rng = np.random.default_rng(21)
        st = make_static(rng)
        dy = make_dynamic(rng)
        assert st.decay_param_names() == ["weight"]
        assert dy.decay_param_names() == ["weight"]
