import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctvos import numcore as nc
from ctvos.gradsuite import PRIMITIVE_CASES, check_primitive, pipeline_check
from ctvos.numcore import _kernels


@pytest.fixture
def f64():
    with nc.precision(64):
        yield


def direct_conv(x, w, stride, pad):
    """Independent nested-loop oracle for conv2d."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, f, i, j] = np.sum(patch * w[f])
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
        w = np.zeros((3, 3, 1, 1))
        w[np.arange(3), np.arange(3)] = 1
        out = nc.conv2d(nc.Tensor(x), nc.Tensor(w))
        np.testing.assert_array_equal(out.data, x.astype(np.float32))

    def test_all_ones_sum(self):
        out = nc.conv2d(nc.Tensor(np.ones((1, 1, 3, 3))), nc.Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    def test_output_shape_formula(self):
        out = nc.conv2d(nc.Tensor(np.zeros((1, 1, 4, 4))), nc.Tensor(np.zeros((1, 1, 2, 2))), stride=2)
        assert out.shape == (1, 1, 2, 2)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
    def test_matches_direct_loops(self, f64, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        out = nc.conv2d(nc.Tensor(x), nc.Tensor(w), stride, pad)
        np.testing.assert_allclose(out.data, direct_conv(x, w, stride, pad), rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(nc.DimensionError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
            nc.conv2d(nc.Tensor(np.zeros((1, 2, 4, 4))), nc.Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(nc.DimensionError):
            nc.conv2d(nc.Tensor(np.zeros((1, 1, 2, 2))), nc.Tensor(np.zeros((1, 1, 3, 3))))

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(2, 1, 2, 6, 6))
        w = nc.Tensor(rng.normal(size=(3, 2, 3, 3)))
        with nc.precision(64):
            w = nc.Tensor(w.data)
            lhs = nc.conv2d(nc.Tensor(a * x + b * y), w, 2, 1).data
            rhs = a * nc.conv2d(nc.Tensor(x), w, 2, 1).data + b * nc.conv2d(nc.Tensor(y), w, 2, 1).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5 * (1 + np.abs(rhs).max()))


class TestSoftmax:
    def test_equal_logits(self):
        np.testing.assert_allclose(nc.softmax(nc.Tensor(np.zeros(4)), 0).data, 0.25)

    def test_closed_form(self):
        out = nc.softmax(nc.Tensor([0.0, np.log(3.0)]), 0).data
        np.testing.assert_allclose(out, [0.25, 0.75], rtol=1e-6)

    def test_shift_invariance(self):
        out = nc.softmax(nc.Tensor([5.0, 5.0 + np.log(3.0)]), 0).data
        np.testing.assert_allclose(out, [0.25, 0.75], rtol=1e-6)

    def test_bad_axis(self):
        with pytest.raises(nc.DimensionError):
            nc.softmax(nc.Tensor(np.zeros((2, 3))), axis=2)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 12)),
                  elements=st.floats(-50, 50)), st.sampled_from([0, 1, -1]))
    def test_slices_sum_to_one(self, x, axis):
        y = nc.softmax(nc.Tensor(x), axis).data
        assert np.all(y >= 0) and np.all(y <= 1)
        np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-5)


class TestBackward:
    def test_sum_gives_ones(self):
        x = nc.Tensor([1.0, -2.0, 3.0], requires_grad=True)
        with nc.Tape() as tape:
            loss = nc.sum(x)
        np.testing.assert_array_equal(nc.backward(loss, tape)[x], np.ones(3))

    def test_square(self):
        x = nc.Tensor([1.0, 2.0], requires_grad=True)
        with nc.Tape() as tape:
            loss = nc.sum(nc.mul(x, x))
        np.testing.assert_array_equal(nc.backward(loss, tape)[x], [2.0, 4.0])

    def test_non_scalar_loss(self):
        x = nc.Tensor([1.0, 2.0], requires_grad=True)
        with nc.Tape() as tape:
            y = nc.mul(x, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            nc.backward(y, tape)

    def test_tape_single_use(self):
        x = nc.Tensor([1.0], requires_grad=True)
        with nc.Tape() as tape:
            loss = nc.sum(x)
        nc.backward(loss, tape)
        with pytest.raises(nc.TapeError):
            nc.backward(loss, tape)

    def test_one_gradient_per_leaf(self):
        a = nc.Tensor([1.0, 2.0], requires_grad=True)
        b = nc.Tensor([3.0, 4.0], requires_grad=True)
        unused = nc.Tensor([5.0], requires_grad=True)
        with nc.Tape() as tape:
            loss = nc.sum(nc.add(nc.mul(a, b), a))
        grads = nc.backward(loss, tape)
        assert set(grads) == {a, b}
        np.testing.assert_array_equal(grads[a], [4.0, 5.0])
        np.testing.assert_array_equal(grads[b], [1.0, 2.0])
        assert unused not in grads

    def test_non_finite_is_error(self):
        with np.errstate(all="ignore"), pytest.raises(nc.NonFiniteError):
            nc.mul(nc.Tensor([np.finfo(np.float32).max]), 10.0)

    def test_no_recording_outside_tape(self):
        x = nc.Tensor([1.0], requires_grad=True)
        y = nc.mul(x, 2.0)
        assert not y.requires_grad


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(f64, name):
    result = check_primitive(name)
    assert result.checked > 0
    assert result.passed, str(result)


def test_full_loss_gradients(f64):
    result = pipeline_check()
    assert result.checked > 100
    assert result.passed, str(result)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": nc.Tensor([1.0, -2.0])}
        before = p["w"].data.copy()
        state = nc.AdamState()
        nc.adam_step(p, {"w": np.zeros(2, np.float32)}, state, lr=1e-4)
        np.testing.assert_array_equal(p["w"].data, before)
        assert state.step == 1

    def test_first_step_magnitude(self, f64):
        p = {"w": nc.Tensor([0.5])}
        nc.adam_step(p, {"w": np.array([0.1])}, nc.AdamState(), lr=1e-4, eps=1e-8)
        expected = -1e-4 * 0.1 / (0.1 + 1e-8)
        np.testing.assert_allclose(p["w"].data[0] - 0.5, expected, rtol=1e-9)

    def test_two_steps_do_not_grow(self, f64):
        p = {"w": nc.Tensor([0.0])}
        state = nc.AdamState()
        g = {"w": np.array([0.1])}
        nc.adam_step(p, g, state, lr=1e-4)
        d1 = p["w"].data[0]
        nc.adam_step(p, g, state, lr=1e-4)
        d2 = p["w"].data[0] - d1
        # closed form for a constant gradient: both bias-corrected moments equal g and g^2
        b1, b2 = 0.9, 0.999
        m2 = (b1 * (1 - b1) * 0.1 + (1 - b1) * 0.1) / (1 - b1 ** 2)
        v2 = (b2 * (1 - b2) * 0.01 + (1 - b2) * 0.01) / (1 - b2 ** 2)
        np.testing.assert_allclose(d2, -1e-4 * m2 / (np.sqrt(v2) + 1e-8), rtol=1e-9)
        assert abs(d2) <= abs(d1) + 1e-15
        assert state.step == 2

    def test_shape_mismatch(self):
        with pytest.raises(nc.DimensionError):
            nc.adam_step({"w": nc.Tensor([1.0])}, {"w": np.zeros(2)}, nc.AdamState())


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(2, 3, 16, 16)), rng.normal(size=(8, 3, 3, 3))
    a = nc.softmax(nc.conv2d(nc.Tensor(x), nc.Tensor(w), 2, 1), 1).data
    b = nc.softmax(nc.conv2d(nc.Tensor(x), nc.Tensor(w), 2, 1), 1).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("fn", [_kernels.softmax_lastaxis_numpy]
                         + ([_kernels.softmax_lastaxis_numba] if _kernels.HAS_NUMBA else []))
def test_softmax_leaves_no_subnormals(fn):
    x = np.array([[0.0, -60.0, -80.0, -95.0, -200.0]], dtype=np.float32)
    y = fn(x)
    tiny = np.finfo(np.float32).tiny
    assert not ((y > 0) & (y < tiny)).any()
    assert y[0, 1] > 0 and y[0, 2] == 0 and abs(y.sum() - 1) < 1e-6


@pytest.mark.skipif(not _kernels.HAS_NUMBA, reason="numba not installed")
class TestKernelBackends:
    def test_im2col_col2im_agree(self):
        rng = np.random.default_rng(0)
        xp = rng.normal(size=(2, 3, 9, 8))
        for stride in (1, 2):
            oh, ow = (9 - 3) // stride + 1, (8 - 3) // stride + 1
            a = _kernels.im2col_numpy(xp, 3, 3, stride, oh, ow)
            b = _kernels.im2col_numba(xp, 3, 3, stride, oh, ow)
            np.testing.assert_array_equal(a, b)
            np.testing.assert_allclose(_kernels.col2im_numpy(a, xp.shape, 3, 3, stride, oh, ow),
                                       _kernels.col2im_numba(a, xp.shape, 3, 3, stride, oh, ow), rtol=1e-12)

    def test_softmax_agree(self):
        x = np.random.default_rng(1).uniform(-50, 50, size=(5, 17))
        np.testing.assert_allclose(_kernels.softmax_lastaxis_numpy(x), _kernels.softmax_lastaxis_numba(x),
                                   rtol=1e-12)
