import numpy as np
import pytest

import oracles
from hdprior.errors import ParameterError, ShapeError, StateError
from hdprior.extractor import init_extractor, ps0_forward, ps01_forward
from hdprior.rftm import (RftmParams, grad_wrt_f0, init_rftm, load_rftm, param_count,
                          residual_forward, residual_from_features, rftm_backward, rftm_forward,
                          save_rftm)
from hdprior.tensor import ConvParams


def _random_params(rng, c0=2, cmid=2, c1=2, dtype=np.float64):
    chans = [c0, cmid, cmid, c1]
    return RftmParams([ConvParams.same(rng.normal(0, 0.5, (chans[k + 1], chans[k], 3, 3)).astype(dtype),
                                       rng.normal(0, 0.1, chans[k + 1]).astype(dtype))
                       for k in range(3)])


def test_zero_params_zero_output(rng):
    p = init_rftm(16, 32, mode="random", seed=0)
    zero = p.with_arrays({k: np.zeros_like(v) for k, v in p.arrays().items()})
    out = rftm_forward(rng.random((2, 16, 32, 32)).astype(np.float32), zero)
    assert out.shape == (2, 32, 16, 16) and not out.any()


def test_zero_residual_identity(rng):
    w = init_extractor(seed=0)
    p = init_rftm(16, 32, seed=0)
    x = rng.random((5, 3, 64, 64)).astype(np.float32)
    assert residual_forward(x, w, p).tobytes() == ps01_forward(x, w).tobytes()


def test_last_layer_linearity(rng):
    p = init_rftm(4, 6, seed=1, mode="random")
    f0 = rng.random((2, 4, 8, 8)).astype(np.float32)
    f1 = rng.random((2, 6, 4, 4)).astype(np.float32)
    arr = p.arrays()
    doubled = p.with_arrays({**arr, "rftm.conv3.weight": 2 * arr["rftm.conv3.weight"]})
    d1 = residual_from_features(f0, f1, p).astype(np.float64) - f1
    d2 = residual_from_features(f0, f1, doubled).astype(np.float64) - f1
    np.testing.assert_allclose(d2, 2 * d1, rtol=1e-5, atol=1e-5)


def test_explicit_two_path(rng):
    p = _random_params(rng)
    f0 = rng.normal(size=(1, 2, 8, 8))
    f1 = rng.normal(size=(1, 2, 4, 4))
    h, _ = oracles.maxpool2(f0)
    for k, c in enumerate(p.convs):
        h = oracles.conv2d(h, c.weight, c.bias, 1, 1)
        if k < 2:
            h = np.maximum(h, 0)
    np.testing.assert_allclose(residual_from_features(f0, f1, p), f1 + h, rtol=1e-12, atol=1e-12)


def test_param_count_and_init():
    p = init_rftm(16, 32)
    assert p.count() == param_count(16, 32, 32) == 9 * 16 * 32 + 32 + 9 * 32 * 32 + 32 + 9 * 32 * 32 + 32
    assert init_rftm(16, 32, seed=3).digest() == init_rftm(16, 32, seed=3).digest()
    assert not p.conv3.weight.any() and p.conv1.weight.any()
    r = init_rftm(16, 32, seed=5, mode="random")
    gen = np.random.default_rng(5)
    for c, (ci, co) in zip(r.convs, [(16, 32), (32, 32), (32, 32)]):
        ref = gen.normal(0.0, np.sqrt(2.0 / (ci * 9)), size=(co, ci, 3, 3)).astype(np.float32)
        assert np.linalg.norm(c.weight) == np.linalg.norm(ref)
    assert init_rftm(4, 8, cmid=5, kernel=5, layers=4).count() == (25 * 4 * 5 + 5 + 2 * (25 * 25 + 5)
                                                                    + 25 * 5 * 8 + 8)
    with pytest.raises(ParameterError):
        init_rftm(4, 8, mode="xavier")
    with pytest.raises(ParameterError):
        init_rftm(4, 8, kernel=2)


def test_backward_zero_grad(rng):
    p = _random_params(rng)
    out, cache = rftm_forward(rng.normal(size=(1, 2, 8, 8)), p, keep_cache=True)
    for g in rftm_backward(cache, np.zeros_like(out), p).values():
        assert not g.any()


@pytest.mark.parametrize("seed", range(4))
def test_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = _random_params(rng)
    f0 = rng.normal(size=(2, 2, 8, 8))
    f1 = rng.normal(size=(2, 2, 4, 4))
    up = rng.normal(size=(2, 2, 4, 4))
    out, cache = residual_from_features(f0, f1, p, keep_cache=True)
    grads = rftm_backward(cache, up, p)
    arrays = p.arrays()
    loss = lambda: float((residual_from_features(f0, f1, p) * up).sum())
    for name, arr in arrays.items():
        assert oracles.rel_error(grads[name], oracles.numeric_grad(loss, arr, 1e-6)) < 1e-6, name
    gf0 = grad_wrt_f0(cache, up, p)
    assert oracles.rel_error(gf0, oracles.numeric_grad(loss, f0, 1e-6)) < 1e-6


def test_backward_detects_stale_cache(rng):
    p = _random_params(rng)
    out, cache = rftm_forward(rng.normal(size=(1, 2, 8, 8)), p, keep_cache=True)
    with pytest.raises(StateError):
        rftm_backward(cache, np.zeros((1, 2, 2, 2)), p)
    p.conv1.weight[0, 0, 0, 0] += 1.0
    with pytest.raises(StateError):
        rftm_backward(cache, np.zeros_like(out), p)


def test_forward_shape_errors(rng):
    p = init_rftm(4, 8)
    with pytest.raises(ShapeError):
        rftm_forward(np.zeros((1, 3, 8, 8)), p)
    with pytest.raises(ShapeError):
        rftm_forward(np.zeros((1, 4, 7, 8)), p)


def test_save_load(tmp_path):
    p = init_rftm(4, 8, seed=2, mode="random")
    save_rftm(tmp_path / "r.tnsr", p)
    back = load_rftm(tmp_path / "r.tnsr")
    assert back.digest() == p.digest()
    save_rftm(tmp_path / "r2.tnsr", back)
    assert (tmp_path / "r2.tnsr").read_bytes() == (tmp_path / "r.tnsr").read_bytes()
