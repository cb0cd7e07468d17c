import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from miscfilter import mga
from miscfilter.exceptions import ConfigurationError
from miscfilter.tensor import bilinear_sample, gradcheck


def heads(rng, c, scale=0.5):
    return ((rng.normal(size=(2, c, 3, 3)) * scale, rng.normal(size=2)),
            (rng.normal(size=(1, c, 3, 3)) * scale, rng.normal(size=1)))


def test_zero_estimators(rng):
    F = rng.normal(size=(5, 6, 7))
    o = mga.estimate_flow(F, np.zeros((2, 5, 3, 3)), np.zeros(2))
    m = mga.estimate_mask(F, np.zeros((1, 5, 3, 3)), np.zeros(1))
    assert o.shape == (2, 6, 7) and not np.any(o)
    assert m.shape == (1, 6, 7)
    np.testing.assert_array_equal(m, 0.5)


@given(st.floats(0.5, 40))
def test_flow_bounded_and_mask_open_interval(max_flow):
    rng = np.random.default_rng(0)
    F = rng.normal(size=(3, 5, 5)) * 50
    o = mga.estimate_flow(F, rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2), max_flow)
    assert np.all(np.abs(o) <= max_flow)
    m = mga.estimate_mask(F, rng.normal(size=(1, 3, 3, 3)) * 0.01, np.zeros(1))
    assert np.all((m > 0) & (m < 1))


def test_warp_zero_flow_is_identity(rng):
    X = rng.normal(size=(4, 6, 5)).astype(np.float32)
    np.testing.assert_array_equal(mga.warp(np.zeros((2, 6, 5), np.float32), X), X)


def test_warp_integer_shift_on_ramp():
    W = 6
    X = np.tile(np.arange(W, dtype=float), (1, 4, 1))
    o = np.zeros((2, 4, W))
    o[0] = 1
    np.testing.assert_array_equal(mga.warp(o, X)[0], np.minimum(np.arange(W) + 1, W - 1)[None].repeat(4, 0))


def test_warp_matches_pixelwise_oracle(rng):
    X = rng.normal(size=(3, 6, 7))
    o = rng.normal(size=(2, 6, 7)) * 1.5
    out = mga.warp(o, X)
    for y in range(6):
        for x in range(7):
            ref = bilinear_sample(X, np.array(x + o[0, y, x]), np.array(y + o[1, y, x]))
            np.testing.assert_allclose(out[:, y, x], ref, atol=1e-12)


def test_warp_batched_matches_single(rng):
    X = rng.normal(size=(3, 2, 5, 6))
    o = rng.normal(size=(2, 2, 5, 6))
    out = mga.warp(o, X)
    for n in range(2):
        np.testing.assert_allclose(out[:, n], mga.warp(o[:, n], X[:, n]), atol=1e-12)


def test_warp_shape_mismatch():
    with pytest.raises(ConfigurationError):
        mga.warp(np.zeros((2, 4, 4)), np.zeros((3, 4, 5)))


def test_warp_sign_round_trip_bit_exact(rng):
    X = rng.normal(size=(2, 5, 5))
    o = rng.normal(size=(2, 5, 5))
    np.testing.assert_array_equal(mga.warp(-(-o), X), mga.warp(o, X))


def test_align_zero_flow_any_mask_returns_inputs(rng):
    for _ in range(5):
        img = rng.uniform(size=(3, 6, 8)).astype(np.float32)
        F = rng.normal(size=(4, 6, 8)).astype(np.float32)
        flow = (np.zeros((2, 4, 3, 3), np.float32), np.zeros(2, np.float32))
        mask = (rng.normal(size=(1, 4, 3, 3)).astype(np.float32), rng.normal(size=1).astype(np.float32))
        a = mga.mga_align(img, F, flow, mask)
        np.testing.assert_array_equal(a.image, img)
        np.testing.assert_array_equal(a.feature, F)


def test_saturated_mask_is_one_sided(rng):
    X = rng.normal(size=(3, 5, 5))
    o = rng.normal(size=(2, 5, 5))
    np.testing.assert_allclose(mga.bidirectional_warp(o, np.ones((1, 5, 5)), X), mga.warp(o, X), atol=1e-12)
    np.testing.assert_allclose(mga.bidirectional_warp(o, np.zeros((1, 5, 5)), X), mga.warp(-o, X), atol=1e-12)


def test_align_matches_composition_oracle(rng):
    img = rng.uniform(size=(3, 6, 6))
    F = rng.normal(size=(4, 6, 6))
    fp, mp = heads(rng, 4)
    a = mga.mga_align(img, F, fp, mp)
    o, m = a.flow, a.mask
    for y in range(6):
        for x in range(6):
            fwd = bilinear_sample(img, np.array(x + o[0, y, x]), np.array(y + o[1, y, x]))
            rev = bilinear_sample(img, np.array(x - o[0, y, x]), np.array(y - o[1, y, x]))
            ref = m[0, y, x] * fwd + (1 - m[0, y, x]) * rev
            np.testing.assert_allclose(a.image[:, y, x], ref, atol=1e-12)


@given(st.integers(0, 10_000))
def test_blend_convexity(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(2, 5, 5))
    o = rng.normal(size=(2, 5, 5)) * 2
    m = rng.uniform(size=(1, 5, 5))
    out = mga.bidirectional_warp(o, m, X)
    fwd, rev = mga.warp(o, X), mga.warp(-o, X)
    assert np.all(out >= np.minimum(fwd, rev) - 1e-12)
    assert np.all(out <= np.maximum(fwd, rev) + 1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradchecks(seed):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(3, 5, 5))
    assert gradcheck(mga.ESTIMATE_FLOW, [F * 10, rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)]).passed
    assert gradcheck(mga.ESTIMATE_MASK, [F, rng.normal(size=(1, 3, 3, 3)), rng.normal(size=1)]).passed
    rep = gradcheck(mga.WARP, [rng.normal(size=(2, 5, 6)), rng.normal(size=(3, 5, 6))])
    assert rep.passed, str(rep)
    fp, mp = heads(rng, 4)
    rep = gradcheck(mga.MGA_ALIGN, [rng.uniform(size=(3, 6, 6)), rng.normal(size=(4, 6, 6)), *fp, *mp])
    assert rep.passed, str(rep)
