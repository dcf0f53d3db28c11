import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcnet.engine import (
    GraphError,
    NonFiniteError,
    Tensor,
    bilinear_upsample,
    celu,
    check_finite,
    conv2d,
    cross_entropy,
    default_dtype,
    grad,
    group_norm,
    no_grad,
    relu,
)
from fd_util import OPS, op_error


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", [0, 1])
def test_op_gradients_match_finite_differences(name, seed):
    assert op_error(name, seed) < 1e-6


# Reference values below were produced once with torch.nn.functional in float64.

def _conv_inputs():
    x = np.sin(np.arange(2 * 3 * 5 * 5) * 0.37).reshape(2, 3, 5, 5)
    k = np.cos(np.arange(4 * 3 * 3 * 3) * 0.53).reshape(4, 3, 3, 3)
    return x, k


def test_conv2d_matches_reference():
    x, k = _conv_inputs()
    with default_dtype(np.float64):
        out = conv2d(Tensor(x), Tensor(k)).data
        out2 = conv2d(Tensor(x), Tensor(k), stride=2).data
    wsum = np.linspace(-1, 1, out.size).reshape(out.shape)
    assert out[0, 0, 0, 0] == pytest.approx(0.882013374374941, abs=1e-12)
    assert out[1, 3, 2, 4] == pytest.approx(-1.074342785964343, abs=1e-12)
    assert (out * wsum).sum() == pytest.approx(3.7741560927569715, abs=1e-11)
    assert out2.shape == (2, 4, 3, 3)
    assert out2[0, 1, 1, 2] == pytest.approx(-0.033443330904559296, abs=1e-12)
    assert out2.sum() == pytest.approx(-0.48891156096535615, abs=1e-11)


def test_group_norm_matches_reference():
    x = np.sin(np.arange(2 * 4 * 3 * 3) * 0.91).reshape(2, 4, 3, 3)
    with default_dtype(np.float64):
        out = group_norm(Tensor(x), 2, Tensor(np.array([1.0, 2.0, 0.5, -1.0])), Tensor(np.array([0.1, 0.0, -0.2, 0.3]))).data
    assert out[0, 0, 0, 0] == pytest.approx(-0.07384183303664522, abs=1e-10)
    assert out[1, 3, 2, 2] == pytest.approx(-1.0090992215032626, abs=1e-10)
    assert (out * x).sum() == pytest.approx(32.81937667166393, abs=1e-8)


def test_celu_matches_reference():
    v = np.array([-3.0, -1.0, -0.1, 0.0, 0.5, 2.0])
    expected = [-0.950212931632136, -0.6321205588285577, -0.09516258196404043, 0.0, 0.5, 2.0]
    with default_dtype(np.float64):
        np.testing.assert_allclose(celu(Tensor(v)).data, expected, atol=1e-14)


def test_bilinear_upsample_matches_half_pixel_reference():
    u = np.arange(12, dtype=float).reshape(1, 2, 2, 3)
    expected = [
        [0.0, 0.25, 0.75, 1.25, 1.75, 2.0],
        [0.75, 1.0, 1.5, 2.0, 2.5, 2.75],
        [2.25, 2.5, 3.0, 3.5, 4.0, 4.25],
        [3.0, 3.25, 3.75, 4.25, 4.75, 5.0],
    ]
    with default_dtype(np.float64):
        np.testing.assert_allclose(bilinear_upsample(Tensor(u), 2).data[0, 0], expected, atol=1e-14)


def test_cross_entropy_matches_reference():
    with default_dtype(np.float64):
        val = cross_entropy(Tensor(np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 0.0]])), [2, 0])
    assert float(val.data) == pytest.approx(0.5058682848905544, abs=1e-14)


def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).data.dtype == np.float32
    with default_dtype(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_grad_does_not_touch_accumulators():
    a = Tensor(np.ones(3), requires_grad=True)
    (g,) = grad([(a * a).sum()], [a])
    np.testing.assert_allclose(g, 2.0)
    assert a.grad is None


def test_backward_accumulates_over_shared_subgraphs():
    a = Tensor(np.array([2.0]), requires_grad=True)
    b = a * a
    (b + b * a).sum().backward()
    # d/da (a^2 + a^3) = 2a + 3a^2
    np.testing.assert_allclose(a.grad, [16.0])


def test_no_grad_builds_no_graph():
    a = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        b = a * 3.0
    assert not b.requires_grad
    with pytest.raises(GraphError):
        b.sum().backward()


def test_check_finite_raises_on_nan():
    with check_finite(), np.errstate(divide="ignore", invalid="ignore"):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0])) / Tensor(np.array([0.0])) * 0.0


def test_conv2d_rejects_even_kernels_and_channel_mismatch():
    x = Tensor(np.zeros((1, 2, 5, 5)))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.zeros((1, 2, 2, 2))))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))


def test_group_norm_rejects_indivisible_groups():
    with pytest.raises(ValueError):
        group_norm(Tensor(np.zeros((1, 3, 2, 2))), 2, Tensor(np.ones(3)), Tensor(np.zeros(3)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 4, 3, 3), elements=st.floats(-50, 50)))
def test_group_norm_output_is_standardized(x):
    if np.ptp(x.reshape(2, 2, -1), axis=2).min() < 1e-2:
        return
    with default_dtype(np.float64):
        out = group_norm(Tensor(x), 2, Tensor(np.ones(4)), Tensor(np.zeros(4))).data.reshape(2, 2, -1)
    np.testing.assert_allclose(out.mean(axis=2), 0.0, atol=1e-9)
    assert np.all(out.var(axis=2) <= 1.0 + 1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (7,), elements=st.floats(-20, 20)))
def test_celu_is_continuous_and_bounded_below(v):
    with default_dtype(np.float64):
        out = celu(Tensor(v)).data
        rel = relu(Tensor(v)).data
    assert np.all(out > -1.0)
    np.testing.assert_allclose(out[v >= 0], v[v >= 0])
    assert np.all(rel >= out)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_conv2d_is_linear_in_input(seed):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.normal(size=(2, 1, 2, 5, 5))
    k = Tensor(rng.normal(size=(2, 2, 3, 3)))
    with default_dtype(np.float64):
        lhs = conv2d(Tensor(2.0 * x1 - x2), k).data
        rhs = 2.0 * conv2d(Tensor(x1), k).data - conv2d(Tensor(x2), k).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-11)
