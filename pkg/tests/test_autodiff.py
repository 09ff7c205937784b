import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lfposterior._binio import FormatError
from lfposterior.autodiff import (
    PadPhase,
    ParamStore,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    backward,
    batchnorm,
    channel_slice,
    concat_channels,
    conv2x2,
    load_checkpoint,
    mul,
    relu,
    rotate90,
    save_checkpoint,
    scale,
    softmax_channels,
    sum_all,
)
from lfposterior.gradcheck import analytic_gradients, numerical_gradients, relative_error

TOL = 1e-3


def weighted_sum(out, w):
    """Scalar probe ``sum(out * w)`` so every output element gets a distinct upstream gradient."""
    return sum_all(mul(out, Tensor(w)))


def gradcheck(fn, arrays, which=None):
    a = analytic_gradients(fn, arrays)
    n = numerical_gradients(fn, arrays, which=which)
    idx = range(len(arrays)) if which is None else which
    return max(relative_error(a[i], n[i]) for i in idx)


class TestConv2x2:
    def ramp(self):
        return np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)

    def top_left(self):
        w = np.zeros((1, 1, 2, 2), np.float32)
        w[0, 0, 0, 0] = 1.0
        return w

    def test_top_left_tap_leading_shifts_down_right(self):
        out = conv2x2(Tensor(self.ramp()), Tensor(self.top_left()), Tensor(np.zeros(1)), PadPhase.LEADING)
        expected = np.array([[0, 0, 0], [0, 0, 1], [0, 3, 4]], np.float32)
        np.testing.assert_array_equal(out.data[0, 0], expected)

    def test_top_left_tap_trailing_is_identity(self):
        out = conv2x2(Tensor(self.ramp()), Tensor(self.top_left()), Tensor(np.zeros(1)), PadPhase.TRAILING)
        np.testing.assert_array_equal(out.data, self.ramp())

    def test_bottom_right_tap_trailing_shifts_up_left(self):
        w = np.zeros((1, 1, 2, 2), np.float32)
        w[0, 0, 1, 1] = 1.0
        out = conv2x2(Tensor(self.ramp()), Tensor(w), Tensor(np.zeros(1)), PadPhase.TRAILING)
        expected = np.array([[4, 5, 0], [7, 8, 0], [0, 0, 0]], np.float32)
        np.testing.assert_array_equal(out.data[0, 0], expected)

    def test_zero_weight_gives_bias(self, rng):
        x = rng.uniform(-1, 1, (2, 3, 5, 4))
        out = conv2x2(Tensor(x), Tensor(np.zeros((2, 3, 2, 2))), Tensor([0.25, -1.5]), PadPhase.LEADING)
        np.testing.assert_array_equal(out.data[:, 0], 0.25)
        np.testing.assert_array_equal(out.data[:, 1], -1.5)

    def test_matches_direct_loop(self, rng):
        x = rng.uniform(-1, 1, (2, 3, 4, 5)).astype(np.float32)
        w = rng.uniform(-1, 1, (4, 3, 2, 2)).astype(np.float32)
        b = rng.uniform(-1, 1, 4).astype(np.float32)
        for phase, pad in ((PadPhase.LEADING, ((1, 0), (1, 0))), (PadPhase.TRAILING, ((0, 1), (0, 1)))):
            xp = np.pad(x, ((0, 0), (0, 0)) + pad).astype(np.float64)
            ref = np.zeros((2, 4, 4, 5))
            for i in range(4):
                for j in range(5):
                    patch = xp[:, :, i:i + 2, j:j + 2]
                    ref[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w) + b
            out = conv2x2(Tensor(x), Tensor(w), Tensor(b), phase)
            np.testing.assert_allclose(out.data, ref, atol=1e-5)

    @pytest.mark.parametrize("phase", list(PadPhase))
    def test_gradients(self, rng, phase):
        x = rng.uniform(-1, 1, (1, 2, 4, 4))
        w = rng.uniform(-1, 1, (3, 2, 2, 2))
        b = rng.uniform(-1, 1, 3)
        probe = rng.uniform(-1, 1, (1, 3, 4, 4))
        err = gradcheck(lambda x, w, b: weighted_sum(conv2x2(x, w, b, phase), probe), [x, w, b])
        assert err < TOL

    def test_shape_errors_name_the_dimension(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        with pytest.raises(ShapeError, match="Cin"):
            conv2x2(x, Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros(1)), PadPhase.LEADING)
        with pytest.raises(ShapeError, match="bias"):
            conv2x2(x, Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros(2)), PadPhase.LEADING)
        with pytest.raises(ShapeError):
            conv2x2(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros(1)), PadPhase.LEADING)

    @given(h=st.integers(1, 7), w=st.integers(1, 7), phase=st.sampled_from(list(PadPhase)))
    @settings(max_examples=25, deadline=None)
    def test_preserves_spatial_size(self, h, w, phase):
        out = conv2x2(Tensor(np.ones((1, 1, h, w))), Tensor(np.ones((2, 1, 2, 2))), Tensor(np.zeros(2)), phase)
        assert out.shape == (1, 2, h, w)


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_all_negative_gives_zero_output_and_gradient(self):
        g = analytic_gradients(lambda x: sum_all(relu(x)), [-np.ones((2, 3))])[0]
        np.testing.assert_array_equal(g, 0.0)

    def test_gradient_away_from_kink(self, rng):
        x = rng.uniform(-1, 1, (1, 2, 3, 3))
        probe = rng.uniform(-1, 1, x.shape)
        fn = lambda x: weighted_sum(relu(x), probe)
        a = analytic_gradients(fn, [x])[0]
        n = numerical_gradients(fn, [x])[0]
        assert relative_error(a, n, mask=np.abs(x) > 1e-2) < TOL


class TestBatchnorm:
    def params(self, c):
        return Tensor(np.ones(c)), Tensor(np.zeros(c)), np.zeros(c, np.float32), np.ones(c, np.float32)

    def test_train_constant_channel_gives_offset(self):
        x = np.broadcast_to(np.array([1.0, -3.0, 7.0])[None, :, None, None], (2, 3, 2, 2))
        s, _, rm, rv = self.params(3)
        out = batchnorm(Tensor(x), s, Tensor([0.5, 0.0, -2.0]), rm, rv, train=True)
        np.testing.assert_allclose(out.data[:, 0], 0.5)
        np.testing.assert_allclose(out.data[:, 2], -2.0)

    def test_eval_identity(self, rng):
        x = rng.uniform(-1, 1, (2, 3, 2, 2)).astype(np.float32)
        s, o, rm, rv = self.params(3)
        out = batchnorm(Tensor(x), s, o, rm, rv, train=False)
        np.testing.assert_allclose(out.data, x, rtol=1e-5)

    def test_running_stats_update(self, rng):
        x = rng.uniform(-1, 1, (2, 2, 3, 3)).astype(np.float32)
        s, o, rm, rv = self.params(2)
        batchnorm(Tensor(x), s, o, rm, rv, train=True)
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(rm, 0.1 * mean, rtol=1e-5)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * var, rtol=1e-5)

    def test_single_element_train_is_an_error(self):
        s, o, rm, rv = self.params(1)
        with pytest.raises(ShapeError):
            batchnorm(Tensor(np.ones((1, 1, 1, 1))), s, o, rm, rv, train=True)

    @pytest.mark.parametrize("train", [True, False])
    def test_gradients(self, rng, train):
        x = rng.uniform(-1, 1, (2, 3, 2, 2))
        sc = rng.uniform(0.5, 1.5, 3)
        off = rng.uniform(-1, 1, 3)
        probe = rng.uniform(-1, 1, x.shape)
        rm = rng.uniform(-0.2, 0.2, 3).astype(np.float32)
        rv = rng.uniform(0.5, 1.5, 3).astype(np.float32)

        def fn(x, s, o):
            return weighted_sum(batchnorm(x, s, o, rm.copy(), rv.copy(), train), probe)

        assert gradcheck(fn, [x, sc, off]) < TOL


class TestRotate90:
    def test_zero_turns_identity(self, rng):
        x = rng.uniform(size=(1, 2, 3, 3))
        np.testing.assert_array_equal(rotate90(Tensor(x), 0).data, x.astype(np.float32))

    def test_one_turn_counter_clockwise(self):
        a, b, c, d = 1.0, 2.0, 3.0, 4.0
        out = rotate90(Tensor(np.array([[[[a, b], [c, d]]]])), 1).data[0, 0]
        np.testing.assert_array_equal(out, [[b, d], [a, c]])

    @given(k=st.integers(-8, 8))
    @settings(max_examples=20, deadline=None)
    def test_inverse_is_bit_exact(self, k):
        x = np.random.default_rng(k + 100).uniform(size=(2, 3, 4, 5)).astype(np.float32)
        np.testing.assert_array_equal(rotate90(rotate90(Tensor(x), k), -k).data, x)

    def test_four_turns_identity(self, rng):
        x = rng.uniform(size=(1, 1, 3, 3)).astype(np.float32)
        np.testing.assert_array_equal(rotate90(Tensor(x), 4).data, x)

    def test_gradient(self, rng):
        x = rng.uniform(-1, 1, (1, 2, 3, 3))
        probe = rng.uniform(-1, 1, x.shape)
        assert gradcheck(lambda x: weighted_sum(rotate90(x, 1), probe), [x]) < TOL


class TestConcatAndSlice:
    def test_single_input_identity(self, rng):
        x = rng.uniform(size=(1, 2, 3, 3)).astype(np.float32)
        np.testing.assert_array_equal(concat_channels([Tensor(x)]).data, x)

    def test_two_inputs_preserved(self):
        a, b = np.zeros((1, 1, 2, 2)), np.ones((1, 1, 2, 2))
        out = concat_channels([Tensor(a), Tensor(b)]).data
        np.testing.assert_array_equal(out[:, 0], 0.0)
        np.testing.assert_array_equal(out[:, 1], 1.0)

    def test_spatial_mismatch_is_an_error(self):
        with pytest.raises(ShapeError):
            concat_channels([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])

    def test_gradient_routing(self, rng):
        a = rng.uniform(-1, 1, (1, 1, 2, 2))
        b = rng.uniform(-1, 1, (1, 2, 2, 2))
        probe = rng.uniform(-1, 1, (1, 3, 2, 2))
        grads = analytic_gradients(lambda a, b: weighted_sum(concat_channels([a, b]), probe), [a, b])
        np.testing.assert_allclose(grads[0], probe[:, :1], rtol=1e-6)
        np.testing.assert_allclose(grads[1], probe[:, 1:], rtol=1e-6)
        assert gradcheck(lambda a, b: weighted_sum(concat_channels([a, b]), probe), [a, b]) < TOL

    def test_channel_slice_gradient(self, rng):
        x = rng.uniform(-1, 1, (1, 3, 2, 2))
        probe = rng.uniform(-1, 1, (1, 2, 2, 2))
        assert gradcheck(lambda x: weighted_sum(channel_slice(x, 1, 3), probe), [x]) < TOL


class TestSoftmax:
    def test_equal_logits_uniform(self):
        out = softmax_channels(Tensor(np.zeros((1, 4, 2, 2)))).data
        np.testing.assert_allclose(out, 0.25)

    def test_closed_form(self):
        out = softmax_channels(Tensor(np.array([0.0, np.log(3.0)]).reshape(1, 2, 1, 1))).data.ravel()
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-7)

    @given(arrays(np.float64, (1, 5, 2, 2), elements=st.floats(-50, 50)))
    @settings(max_examples=30, deadline=None)
    def test_simplex(self, x):
        out = softmax_channels(Tensor(x)).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_gradient(self, rng):
        x = rng.uniform(-1, 1, (1, 4, 2, 2))
        probe = rng.uniform(-1, 1, x.shape)
        assert gradcheck(lambda x: weighted_sum(softmax_channels(x), probe), [x]) < TOL


class TestBackward:
    def test_sum_gives_ones(self):
        store = ParamStore()
        p = store.add("p", np.arange(6.0).reshape(2, 3))
        with Tape() as tape:
            loss = sum_all(p)
        backward(loss, tape, store)
        np.testing.assert_array_equal(p.grad, 1.0)

    def test_half_square_norm_gives_p(self, rng):
        store = ParamStore()
        p = store.add("p", rng.uniform(-1, 1, 5))
        with Tape() as tape:
            loss = scale(sum_all(mul(p, p)), 0.5)
        backward(loss, tape, store)
        np.testing.assert_allclose(p.grad, p.data, rtol=1e-6)

    def test_accumulates_without_zeroing(self):
        store = ParamStore()
        p = store.add("p", np.ones(3))
        for _ in range(2):
            with Tape() as tape:
                loss = sum_all(p)
            backward(loss, tape, store)
        np.testing.assert_array_equal(p.grad, 2.0)
        store.zero_grad()
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_non_scalar_loss_is_an_error(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = scale(p, 2.0)
        with pytest.raises(ShapeError):
            backward(out, tape)

    def test_conv_relu_sum_network(self, rng):
        x = rng.uniform(-1, 1, (1, 2, 4, 4))
        w1 = rng.uniform(-1, 1, (3, 2, 2, 2))
        w2 = rng.uniform(-1, 1, (1, 3, 2, 2))
        b1, b2 = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 1)

        def fn(x, w1, b1, w2, b2):
            h = relu(conv2x2(x, w1, b1, PadPhase.LEADING))
            return sum_all(conv2x2(h, w2, b2, PadPhase.TRAILING))

        assert gradcheck(fn, [x, w1, b1, w2, b2]) < TOL

    def test_shared_input_used_twice(self, rng):
        x = rng.uniform(-1, 1, (1, 1, 3, 3))
        fn = lambda x: sum_all(mul(rotate90(x, 1), rotate90(x, 1)))
        np.testing.assert_allclose(analytic_gradients(fn, [x])[0], 2 * x, rtol=1e-6)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        store = ParamStore()
        p = store.add("p", np.array([1.0, -2.0]))
        adam_step(store, 1e-3)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        store = ParamStore()
        p = store.add("p", np.zeros(3))
        p.grad[...] = [0.5, -2.0, 10.0]
        adam_step(store, 1e-3)
        np.testing.assert_allclose(p.data, [-1e-3, 1e-3, -1e-3], rtol=1e-4)
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_equal_gradients_move_identically(self):
        store = ParamStore()
        a, b = store.add("a", np.ones(2)), store.add("b", np.ones(2))
        for _ in range(3):
            a.grad[...] = 0.3
            b.grad[...] = 0.3
            adam_step(store, 1e-2)
        np.testing.assert_array_equal(a.data, b.data)


class TestParamStoreAndCheckpoint:
    def test_unique_names_and_reserved_suffixes(self):
        store = ParamStore()
        store.add("w", np.zeros(2))
        with pytest.raises(KeyError):
            store.add("w", np.zeros(2))
        with pytest.raises(KeyError):
            store.add("bn.running_mean", np.zeros(2))
        with pytest.raises(KeyError):
            store.add_buffer("bn.stats", np.zeros(2))

    def test_every_parameter_has_gradient_slot(self):
        store = ParamStore()
        for i in range(3):
            store.add(f"p{i}", np.zeros((i + 1, 2)))
        assert all(p.grad.shape == p.data.shape for p in store.parameters())

    def test_round_trip(self, tmp_path, rng):
        store = ParamStore()
        store.add("conv.weight", rng.standard_normal((2, 3, 2, 2)))
        store.add("scalar", np.array(3.5))
        store.add_buffer("bn.running_var", rng.uniform(size=4))
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, store)
        raw = path.read_bytes()
        assert raw[:4] == b"LFCP"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 3
        state = load_checkpoint(path)
        assert list(state) == ["conv.weight", "scalar", "bn.running_var"]
        for k, v in store.state().items():
            np.testing.assert_array_equal(state[k], v)

    def test_bad_magic_and_truncation(self, tmp_path):
        store = ParamStore()
        store.add("w", np.ones(4))
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, store)
        raw = path.read_bytes()
        (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "bad.ckpt")
        (tmp_path / "short.ckpt").write_bytes(raw[:-3])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "short.ckpt")


def test_forward_is_deterministic(rng):
    x = rng.uniform(-1, 1, (2, 3, 5, 5)).astype(np.float32)
    w = rng.uniform(-1, 1, (4, 3, 2, 2)).astype(np.float32)
    outs = [conv2x2(Tensor(x), Tensor(w), Tensor(np.zeros(4)), PadPhase.LEADING).data for _ in range(2)]
    np.testing.assert_array_equal(outs[0], outs[1])
