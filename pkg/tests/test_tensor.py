import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from hdprior import kernels
from hdprior.errors import ShapeError
from hdprior.tensor import (ConvParams, add, conv2d, conv2d_grad, maxpool2, maxpool2_grad, relu,
                            relu_grad)


def test_conv_all_ones_kernel_sums_input():
    x = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)
    out = conv2d(x, ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 45.0


def test_conv_delta_kernel_is_identity(rng):
    x = rng.normal(size=(2, 3, 7, 5)).astype(np.float32)
    w = np.zeros((3, 3, 3, 3), np.float32)
    w[np.arange(3), np.arange(3), 1, 1] = 1.0
    np.testing.assert_array_equal(conv2d(x, ConvParams.same(w, np.zeros(3))), x)


def test_conv_matches_nested_loops(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride, pad in [(1, 0), (1, 1), (2, 1)]:
        got = conv2d(x, ConvParams(w, b, stride, pad))
        np.testing.assert_allclose(got, oracles.conv2d(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_float32_storage(rng):
    x = rng.normal(size=(1, 2, 5, 5)).astype(np.float32)
    p = ConvParams.same(rng.normal(size=(3, 2, 3, 3)).astype(np.float32), np.zeros(3))
    out = conv2d(x, p)
    assert out.dtype == np.float32
    assert conv2d(x.astype(np.float64), p).dtype == np.float64
    ref = oracles.conv2d(x.astype(np.float64), p.weight.astype(np.float64), np.zeros(3), 1, 1)
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), co=st.integers(1, 3), h=st.integers(3, 7),
       w=st.integers(3, 7), k=st.sampled_from([1, 3]), stride=st.integers(1, 2),
       pad=st.integers(0, 1), seed=st.integers(0, 2 ** 16))
def test_conv_property_against_oracle(n, c, co, h, w, k, stride, pad, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, c, h, w))
    wt = r.normal(size=(co, c, k, k))
    b = r.normal(size=co)
    got = conv2d(x, ConvParams(wt, b, stride, pad))
    np.testing.assert_allclose(got, oracles.conv2d(x, wt, b, stride, pad), rtol=1e-11, atol=1e-11)


def test_conv_grad_zero_upstream(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    p = ConvParams.same(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    for g in conv2d_grad(x, p, np.zeros((1, 3, 4, 4))):
        assert not g.any()


def test_conv_grad_scalar_chain_rule():
    gx, gw, gb = conv2d_grad(np.full((1, 1, 1, 1), 2.0), ConvParams(np.full((1, 1, 1, 1), 3.0),
                                                                    np.zeros(1)),
                             np.full((1, 1, 1, 1), 5.0))
    assert (gx.item(), gw.item(), gb.item()) == (15.0, 10.0, 5.0)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 0), (2, 1)])
def test_conv_grad_finite_differences(rng, stride, pad):
    x = rng.normal(size=(2, 2, 5, 5))
    p = ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), stride, pad)
    up = rng.normal(size=conv2d(x, p).shape)
    gx, gw, gb = conv2d_grad(x, p, up)
    loss = lambda: float((conv2d(x, p) * up).sum())
    assert oracles.rel_error(gx, oracles.numeric_grad(loss, x)) < 1e-6
    assert oracles.rel_error(gw, oracles.numeric_grad(loss, p.weight)) < 1e-6
    assert oracles.rel_error(gb, oracles.numeric_grad(loss, p.bias)) < 1e-6


def test_conv_shape_errors(rng):
    p = ConvParams(np.zeros((1, 2, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 3, 5, 5)), p)
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 2, 2, 2)), p)
    with pytest.raises(ShapeError):
        conv2d(np.zeros((2, 5, 5)), p)
    with pytest.raises(ShapeError):
        ConvParams(np.zeros((2, 1, 3, 3)), np.zeros(3))
    with pytest.raises(ShapeError):
        conv2d_grad(np.zeros((1, 2, 5, 5)), p, np.zeros((1, 1, 5, 5)))


def test_non_finite_output_rejected():
    p = ConvParams(np.full((1, 1, 1, 1), 1e300), np.zeros(1))
    with pytest.raises(FloatingPointError):
        conv2d(np.full((1, 1, 2, 2), 1e300), p)


def test_maxpool_simple_case():
    out, arg = maxpool2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out.item() == 4.0 and arg.item() == 3
    g = maxpool2_grad(arg, np.array([[[[5.0]]]]), (1, 1, 2, 2))
    np.testing.assert_array_equal(g, [[[[0, 0], [0, 5]]]])


def test_maxpool_ties_pick_first():
    out, arg = maxpool2(np.full((1, 1, 4, 4), 0.5, np.float32))
    assert (out == 0.5).all()
    np.testing.assert_array_equal(arg[0, 0], [[0, 2], [8, 10]])


def test_maxpool_matches_window_scan(rng):
    x = rng.normal(size=(1, 2, 6, 6))
    out, arg = maxpool2(x)
    ref, ref_arg = oracles.maxpool2(x)
    np.testing.assert_array_equal(out, ref)
    np.testing.assert_array_equal(arg, ref_arg)


def test_maxpool_grad(rng):
    x = rng.normal(size=(2, 3, 4, 6))
    out, arg = maxpool2(x)
    up = rng.normal(size=out.shape)
    assert not maxpool2_grad(arg, np.zeros_like(up), x.shape).any()
    g = maxpool2_grad(arg, up, x.shape)
    num = oracles.numeric_grad(lambda: float((maxpool2(x)[0] * up).sum()), x, step=1e-6)
    assert oracles.rel_error(g, num) < 1e-6


def test_maxpool_rejects_odd():
    with pytest.raises(ShapeError):
        maxpool2(np.zeros((1, 1, 3, 4)))


def test_relu_and_grad(rng):
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    assert not np.signbit(relu(np.array([-0.0]))).any()
    x = rng.uniform(0.1, 2.0, size=(2, 3))
    np.testing.assert_array_equal(relu(x), x)
    g = rng.normal(size=x.shape)
    np.testing.assert_array_equal(relu_grad(x, g), g)
    y = rng.normal(size=(3, 4))
    y[np.abs(y) < 1e-2] = 0.5
    up = rng.normal(size=y.shape)
    num = oracles.numeric_grad(lambda: float((relu(y) * up).sum()), y, step=1e-4)
    np.testing.assert_allclose(relu_grad(y, up), num, atol=1e-9)


def test_add(rng):
    a = rng.normal(size=(2, 3)).astype(np.float32)
    b = rng.normal(size=(2, 3)).astype(np.float32)
    np.testing.assert_array_equal(add(a, np.zeros_like(a)), a)
    np.testing.assert_array_equal(add(np.array([1.0, 2.0]), np.array([3.0, 4.0])), [4.0, 6.0])
    np.testing.assert_array_equal(add(a, b), add(b, a))
    with pytest.raises(ShapeError):
        add(a, b[:1])


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 2, 5), (2, 0, 1)])
def test_backends_agree(rng, stride, pad, k):
    nb, npy = kernels.get("numba"), kernels.get("numpy")
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    y1 = nb.conv2d_forward(x, w, b, stride, pad)
    y2 = npy.conv2d_forward(x, w, b, stride, pad)
    np.testing.assert_allclose(y1, y2, rtol=1e-12, atol=1e-12)
    up = rng.normal(size=y1.shape)
    for a, c in zip(nb.conv2d_backward(x, w, up, stride, pad),
                    npy.conv2d_backward(x, w, up, stride, pad)):
        np.testing.assert_allclose(a, c, rtol=1e-11, atol=1e-11)
    p = rng.normal(size=(2, 3, 8, 8))
    o1, a1 = nb.maxpool2_forward(p)
    o2, a2 = npy.maxpool2_forward(p)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(nb.maxpool2_backward(a1, o1, 8, 8),
                                  npy.maxpool2_backward(a2, o2, 8, 8))
    img = rng.random((11, 13))
    np.testing.assert_array_equal(nb.min_filter2d(img, 5), npy.min_filter2d(img, 5))
    pts = rng.normal(size=(7, 4))
    np.testing.assert_allclose(nb.sqdist(pts, pts[:3]), npy.sqdist(pts, pts[:3]), rtol=1e-12)


def test_backend_flag_rejects_unknown():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-c", "import hdprior.kernels"],
                       env={**__import__("os").environ, "HDPRIOR_BACKEND": "cuda"},
                       capture_output=True, text=True)
    assert r.returncode != 0 and "HDPRIOR_BACKEND" in r.stderr


def test_backend_flag_selects_numpy():
    import os
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-c", "import hdprior.kernels as k; print(k.BACKEND)"],
                       env={**os.environ, "HDPRIOR_BACKEND": "numpy"}, capture_output=True, text=True)
    assert r.stdout.strip() == "numpy"
