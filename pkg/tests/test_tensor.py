import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gaitfusion import tensor as T
from gaitfusion.tensor import ShapeError, Tape, Tensor, backward, grad_check
from gaitfusion.tensor.core import record


def f64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def grads(fn, *xs):
    xs = [f64(x, True) for x in xs]
    with Tape() as tape:
        out = fn(*xs)
    backward(out, tape)
    return [x.grad for x in xs]


# -- tensor container -------------------------------------------------------

def test_default_dtype_is_f32_and_f64_is_kept():
    assert Tensor([1, 2]).dtype == np.float32 and Tensor([0.5]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64
    with pytest.raises(TypeError):
        Tensor(np.zeros(2), dtype=np.int32)


def test_grad_matches_data_shape_and_dtype():
    for dt in (np.float32, np.float64):
        x = Tensor(np.ones((2, 3), dtype=dt), requires_grad=True)
        with Tape() as tape:
            y = T.sum_(x * x)
        backward(y, tape)
        assert x.grad.shape == x.shape and x.grad.dtype == dt


# -- elementwise --------------------------------------------------------------

def test_elementwise_examples():
    np.testing.assert_array_equal(T.minimum(Tensor([0.6, 0.2]), Tensor([0.4, 0.8])).data, np.float32([0.4, 0.2]))
    np.testing.assert_array_equal(T.add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])
    np.testing.assert_array_equal((Tensor([2, 3]) * 0.5).data, [1, 1.5])


def test_elementwise_errors():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with pytest.raises(ZeroDivisionError):
        T.div(Tensor([1.0, 2.0]), Tensor([1.0, 0.0]))


@pytest.mark.parametrize("kind", ["min", "max"])
def test_extremum_tie_routes_to_first_argument(kind):
    ga, gb = grads(lambda a, b: T.sum_(T.elementwise(kind, a, b)), [1.0, 2.0], [1.0, 3.0])
    if kind == "min":
        np.testing.assert_array_equal(ga, [1, 1])
        np.testing.assert_array_equal(gb, [0, 0])
    else:
        np.testing.assert_array_equal(ga, [1, 0])
        np.testing.assert_array_equal(gb, [0, 1])


def test_min_routing_tie_free():
    ga, gb = grads(lambda a, b: T.sum_(T.minimum(a, b)), [1.0], [2.0])
    assert ga[0] == 1 and gb[0] == 0


shapes = st.sampled_from([((3, 4), (4,)), ((2, 1, 4), (3, 1)), ((1,), (2, 3)), ((2, 3), (2, 3)), ((), (2,))])


@given(shapes, st.sampled_from(["add", "sub", "mul", "div", "min", "max"]), st.integers(0, 1000))
def test_broadcast_matches_loop_reference(shape_pair, kind, seed):
    r = np.random.default_rng(seed)
    sa, sb = shape_pair
    a = r.uniform(0.5, 2.0, sa)
    b = r.uniform(0.5, 2.0, sb)
    out = T.elementwise(kind, f64(a), f64(b)).data
    shape = np.broadcast_shapes(sa, sb)
    fn = {"add": lambda x, y: x + y, "sub": lambda x, y: x - y, "mul": lambda x, y: x * y,
          "div": lambda x, y: x / y, "min": min, "max": max}[kind]
    A, B = np.broadcast_to(a, shape), np.broadcast_to(b, shape)
    ref = np.empty(shape)
    for idx in itertools.product(*map(range, shape)):
        ref[idx] = fn(float(A[idx]), float(B[idx]))
    np.testing.assert_array_equal(out, ref)


# -- conv2d ---------------------------------------------------------------------

def conv_reference(x, w, stride, pad):
    B, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for b in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    out[b, o, i, j] = np.sum(xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw] * w[o])
    return out


def test_conv_all_ones_examples():
    x, w = Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3)))
    assert T.conv2d(x, w, 1, 0).data.reshape(-1).tolist() == [9]
    np.testing.assert_array_equal(T.conv2d(x, w, 1, 1).data[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_matches_nested_loop(rng):
    x, w = rng.standard_normal((2, 3, 8, 6)), rng.standard_normal((4, 3, 3, 3))
    out = T.conv2d(f64(x), f64(w), 2, 1).data
    assert out.shape == (2, 4, 4, 3)
    np.testing.assert_allclose(out, conv_reference(x, w, 2, 1), rtol=1e-12, atol=1e-12)


@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(3, 7),
       st.sampled_from([1, 3]), st.integers(1, 2), st.integers(0, 1), st.integers(0, 99))
def test_conv_property(B, C, Co, H, W, k, stride, pad, seed):
    r = np.random.default_rng(seed)
    x, w = r.standard_normal((B, C, H, W)), r.standard_normal((Co, C, k, k))
    np.testing.assert_allclose(T.conv2d(f64(x), f64(w), stride, pad).data, conv_reference(x, w, stride, pad),
                               rtol=1e-10, atol=1e-10)


def test_conv_errors():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), 1, 0)
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), 1, 1)
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), 0, 1)


# -- pairwise softmax / min-max ------------------------------------------------------

def test_pairwise_softmax_examples():
    a, b = T.pairwise_softmax(f64(0.0), f64(0.0))
    assert (a.item(), b.item()) == (0.5, 0.5)
    a, b = T.pairwise_softmax(f64(np.log(3)), f64(0.0))
    assert a.item() == pytest.approx(0.75, abs=1e-15) and b.item() == pytest.approx(0.25, abs=1e-15)
    a, b = T.pairwise_softmax(f64(1000.0), f64(1000.0))
    assert (a.item(), b.item()) == (0.5, 0.5)
    with pytest.raises(ShapeError):
        T.pairwise_softmax(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-1e4, 1e4)),
       hnp.arrays(np.float64, (3, 4), elements=st.floats(-1e4, 1e4)))
def test_pairwise_softmax_sums_to_one(a, b):
    pa, pb = T.pairwise_softmax(f64(a), f64(b))
    np.testing.assert_allclose(pa.data + pb.data, 1.0, atol=1e-12)
    qa, qb = T.pairwise_softmax(Tensor(a.astype(np.float32)), Tensor(b.astype(np.float32)))
    np.testing.assert_allclose(qa.data + qb.data, 1.0, atol=1e-6)


def slice_norm(values):
    x = f64(np.asarray(values, dtype=float).reshape(1, 1, 1, -1))
    return T.minmax_normalize_spatial(x).data.reshape(-1)


def test_minmax_examples():
    np.testing.assert_array_equal(slice_norm([1, 2, 3, 5]), [0, 0.25, 0.5, 1])
    np.testing.assert_array_equal(slice_norm([-1, 0, 1]), [0, 0.5, 1])
    np.testing.assert_array_equal(slice_norm([2, 2, 2]), [0.5, 0.5, 0.5])


def test_minmax_validation():
    with pytest.raises(ShapeError):
        T.minmax_normalize_spatial(Tensor(np.zeros((2, 3))))
    with pytest.raises(ValueError):
        T.minmax_normalize_spatial(Tensor(np.zeros((1, 1, 2, 2))), epsilon=0)


@given(hnp.arrays(np.float64, (2, 3, 4, 3), elements=st.floats(-100, 100)))
def test_minmax_range_and_extremes(x):
    y = T.minmax_normalize_spatial(f64(x)).data
    assert y.min() >= 0 and y.max() <= 1
    spread = x.max(axis=(2, 3)) - x.min(axis=(2, 3))
    for b, c in zip(*np.nonzero(spread > 1e-6)):
        assert y[b, c].min() == 0.0 and y[b, c].max() == 1.0


def test_minmax_degenerate_slice_has_zero_gradient():
    (g,) = grads(lambda x: T.sum_(T.minmax_normalize_spatial(x) * f64(np.arange(4.0).reshape(1, 1, 2, 2))),
                 np.full((1, 1, 2, 2), 3.0))
    np.testing.assert_array_equal(g, 0)


# -- reductions, concat ----------------------------------------------------------

def test_reduce_examples():
    assert T.mean(Tensor([1, 2, 3, 6])).item() == 3
    np.testing.assert_array_equal(T.reduce("max", Tensor([[1, 4], [3, 2]]), 0).data, [3, 4])
    (g,) = grads(lambda x: T.sum_(x), np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(g, np.ones((2, 3)))


def test_reduce_first_extremum_gets_gradient():
    (g,) = grads(lambda x: T.reduce("max", x), [1.0, 5.0, 5.0, 2.0])
    np.testing.assert_array_equal(g, [0, 1, 0, 0])
    (g,) = grads(lambda x: T.sum_(T.reduce("min", x, 1)), [[3.0, 1.0, 1.0], [0.0, 0.0, 2.0]])
    np.testing.assert_array_equal(g, [[0, 1, 0], [1, 0, 0]])


def test_reduce_invalid_axes():
    with pytest.raises(ValueError):
        T.sum_(Tensor(np.zeros((2, 3))), 2)
    with pytest.raises(ValueError):
        T.sum_(Tensor(np.zeros((2, 3))), (0, 0))


def test_concat_examples(rng):
    a, b = Tensor(rng.standard_normal((2, 2, 3, 3))), Tensor(rng.standard_normal((2, 3, 3, 3)))
    c = T.concat([a, b], axis=1)
    assert c.shape == (2, 5, 3, 3)
    np.testing.assert_array_equal(c.data[:, :2], a.data)
    np.testing.assert_array_equal(c.data[:, 2:], b.data)
    np.testing.assert_array_equal(T.concat([a], axis=1).data, a.data)
    with pytest.raises(ShapeError):
        T.concat([a, Tensor(np.zeros((2, 3, 4, 3)))], axis=1)


# -- backward --------------------------------------------------------------------------

def test_backward_examples():
    gw, gx = grads(lambda w, x: T.sum_(w * x), [1.0, 2.0], [3.0, 4.0])
    np.testing.assert_array_equal(gw, [3, 4])
    np.testing.assert_array_equal(gx, [1, 2])


def test_backward_non_scalar_loss():
    x = f64([1.0, 2.0], True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        backward(y, tape)


def test_unreachable_leaf_gets_zero_gradient():
    x, z = f64([1.0, 2.0], True), f64([5.0], True)
    with Tape() as tape:
        unused = z * 3.0  # noqa: F841
        y = T.sum_(x * x)
    backward(y, tape)
    np.testing.assert_array_equal(z.grad, [0])
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_backward_is_additive(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))

    def l1(x):
        return T.sum_(T.exp(x) * f64(a))

    def l2(x):
        return T.sum_(T.sigmoid(x) * f64(b))

    x0 = rng.standard_normal((3, 4))
    (g1,) = grads(l1, x0)
    (g2,) = grads(l2, x0)
    (g12,) = grads(lambda x: l1(x) + l2(x), x0)
    np.testing.assert_allclose(g1 + g2, g12, rtol=1e-13, atol=1e-13)


def test_tape_visits_each_node_once():
    calls = []
    x = f64([1.0, 2.0], True)
    with Tape() as tape:
        y = x * 2.0
        out = Tensor(y.data.sum(), dtype=np.float64)

        def back(gs):
            calls.append(1)
            return [np.full(y.shape, gs[0])]

        record("sum", [y], [out], back)
    backward(out, tape)
    assert calls == [1]
    np.testing.assert_array_equal(x.grad, [2, 2])


def test_no_recording_without_tape():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2
    assert y.is_leaf and not y.requires_grad


# -- grad_check -------------------------------------------------------------------

def test_grad_check_linear_is_exact(rng):
    w = rng.standard_normal(5)
    rep = grad_check(lambda x: T.sum_(x * f64(w)), [f64(rng.standard_normal(5))])
    assert rep.passed and rep.max_rel_error < 1e-9


def test_grad_check_conv_relu(rng):
    x, w = f64(rng.standard_normal((1, 2, 5, 5))), f64(rng.standard_normal((3, 2, 3, 3)))
    rep = grad_check(lambda x, w: T.sum_(T.relu(T.conv2d(x, w, 1, 1))), [x, w], epsilon=1e-5, tolerance=1e-4)
    assert rep.passed, str(rep)


def test_grad_check_flags_corrupted_backward(rng):
    def bad_square(x):
        out = Tensor(x.data ** 2, dtype=x.dtype)
        record("bad_square", [x], [out], lambda gs: [gs[0] * 3.0 * x.data])  # should be 2x
        return T.sum_(out)

    rep = grad_check(bad_square, [f64(rng.uniform(1, 2, 4))])
    assert not rep.passed
    assert rep.worst_input == 0 and rep.worst_index is not None
    assert "FAIL" in str(rep)
