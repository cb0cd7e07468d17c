import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from miscfilter import tensor as T
from miscfilter.exceptions import ConfigurationError, NumericError


def conv_oracle(x, w, b):
    """Direct nested-loop cross-correlation with clamped (replicate) indices."""
    C, H, W = x.shape
    O, _, k, _ = w.shape
    r = k // 2
    out = np.zeros((O, H, W))
    for o in range(O):
        for yy in range(H):
            for xx in range(W):
                acc = b[o]
                for c in range(C):
                    for i in range(k):
                        for j in range(k):
                            sy = min(max(yy + i - r, 0), H - 1)
                            sx = min(max(xx + j - r, 0), W - 1)
                            acc += w[o, c, i, j] * x[c, sy, sx]
                out[o, yy, xx] = acc
    return out


def sample_oracle(img, x, y):
    C, H, W = img.shape
    x = min(max(x, 0.0), W - 1.0)
    y = min(max(y, 0.0), H - 1.0)
    x0 = min(int(np.floor(x)), W - 2) if W > 1 else 0
    y0 = min(int(np.floor(y)), H - 2) if H > 1 else 0
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    fx, fy = x - x0, y - y0
    return ((1 - fx) * (1 - fy) * img[:, y0, x0] + fx * (1 - fy) * img[:, y0, x1]
            + (1 - fx) * fy * img[:, y1, x0] + fx * fy * img[:, y1, x1])


# ---------------------------------------------------------------------------
# conv2d


def test_conv_identity_1x1(rng):
    x = rng.normal(size=(4, 5, 6))
    w = np.eye(4)[:, :, None, None]
    np.testing.assert_array_equal(T.conv2d(x, w, np.zeros(4)), x)


def test_conv_ones_on_constant_is_9c():
    x = np.full((1, 5, 7), 0.3)
    out = T.conv2d(x, np.ones((1, 1, 3, 3)), np.zeros(1))
    np.testing.assert_allclose(out, 2.7, atol=1e-12)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_matches_nested_loop_oracle(rng, k):
    x = rng.normal(size=(3, 5, 5))
    w = rng.normal(size=(2, 3, k, k))
    b = rng.normal(size=2)
    np.testing.assert_allclose(T.conv2d(x, w, b), conv_oracle(x, w, b), atol=1e-10)
    got32 = T.conv2d(x.astype(np.float32), w.astype(np.float32), b.astype(np.float32))
    np.testing.assert_allclose(got32, conv_oracle(x, w, b), atol=1e-5)


def test_conv_batched_equals_per_image(rng):
    x = rng.normal(size=(3, 4, 6, 6))
    w = rng.normal(size=(5, 3, 3, 3))
    b = rng.normal(size=5)
    out = T.conv2d(x, w, b)
    for n in range(4):
        np.testing.assert_allclose(out[:, n], T.conv2d(x[:, n], w, b), atol=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(ConfigurationError):
        T.conv2d(np.zeros((3, 4, 4)), np.zeros((2, 2, 3, 3)))
    with pytest.raises(ConfigurationError):
        T.conv2d(np.zeros((3, 4, 4)), np.zeros((2, 3, 2, 2)))


def test_conv_matches_torch_reference(rng):
    torch = pytest.importorskip("torch")
    F = torch.nn.functional
    x = rng.normal(size=(3, 2, 9, 7))
    w = rng.normal(size=(4, 3, 5, 5))
    b = rng.normal(size=4)
    xt = torch.tensor(x.transpose(1, 0, 2, 3))
    ref = F.conv2d(F.pad(xt, (2, 2, 2, 2), mode="replicate"), torch.tensor(w), torch.tensor(b))
    np.testing.assert_allclose(T.conv2d(x, w, b), ref.numpy().transpose(1, 0, 2, 3), atol=1e-10)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linear_in_data(alpha, beta):
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    lhs = T.conv2d(alpha * a + beta * b, w)
    rhs = alpha * T.conv2d(a, w) + beta * T.conv2d(b, w)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


# ---------------------------------------------------------------------------
# activations


def test_sigmoid_values():
    assert T.sigmoid(np.array(0.0)) == 0.5
    assert abs(T.sigmoid(np.array(100.0)) - 1.0) <= 1e-9
    assert np.all(np.isfinite(T.sigmoid(np.array([-1000.0, 1000.0]))))


def test_sigmoid_gradient_at_zero():
    h = 1e-5
    fd = (T.sigmoid(np.array(h)) - T.sigmoid(np.array(-h))) / (2 * h)
    analytic = T.sigmoid_backward(np.array(1.0), T.sigmoid(np.array(0.0)))
    assert analytic == 0.25
    assert abs(fd - 0.25) < 1e-9


def test_channel_softmax_examples():
    np.testing.assert_allclose(T.channel_softmax(np.zeros((4, 2, 3))), 0.25)
    logits = np.zeros((4, 1, 1))
    logits[0] = 10
    # e^10 / (e^10 + 3) = 0.999864: saturated, though not past 0.9999
    p0 = T.channel_softmax(logits)[0, 0, 0]
    assert abs(p0 - np.exp(10) / (np.exp(10) + 3)) < 1e-12
    assert p0 > 0.9998


@given(st.integers(1, 12), st.floats(-50, 50))
def test_channel_softmax_normalised_and_shift_invariant(g, shift):
    x = np.random.default_rng(g).normal(scale=5, size=(g, 3, 4))
    p = T.channel_softmax(x)
    np.testing.assert_allclose(p.sum(axis=0), 1, atol=1e-6)
    np.testing.assert_allclose(T.channel_softmax(x + shift * np.ones((1, 3, 4))), p, atol=1e-12)


# ---------------------------------------------------------------------------
# concat


def test_concat_examples(rng):
    X = rng.normal(size=(2, 3, 3))
    np.testing.assert_array_equal(T.concat(X, np.zeros((0, 3, 3))), X)
    b = rng.normal(size=(3, 3, 3))
    c = T.concat(X, b)
    assert c.shape == (5, 3, 3)
    np.testing.assert_array_equal(c[2], b[0])
    ga, gb = T.concat_backward(c, 2)
    np.testing.assert_array_equal(ga, X)
    np.testing.assert_array_equal(gb, b)
    with pytest.raises(ConfigurationError):
        T.concat(X, np.zeros((1, 3, 4)))


# ---------------------------------------------------------------------------
# bilinear sampling


def test_bilinear_integer_and_midpoint(rng):
    img = rng.normal(size=(2, 4, 5))
    np.testing.assert_array_equal(T.bilinear_sample(img, np.array(3.0), np.array(2.0)), img[:, 2, 3])
    mid = T.bilinear_sample(img, np.array(1.5), np.array(2.0))
    np.testing.assert_allclose(mid, (img[:, 2, 1] + img[:, 2, 2]) / 2, atol=1e-15)


def test_bilinear_clamps_outside(rng):
    img = rng.normal(size=(1, 4, 5))
    out = T.bilinear_sample(img, np.array([-3.0, 9.0]), np.array([-1.0, 7.0]))
    np.testing.assert_array_equal(out[:, 0], img[:, 0, 0])
    np.testing.assert_array_equal(out[:, 1], img[:, 3, 4])


def test_bilinear_matches_scalar_oracle(rng):
    img = rng.normal(size=(3, 6, 7))
    xs = rng.uniform(-2, 9, size=20)
    ys = rng.uniform(-2, 8, size=20)
    out = T.bilinear_sample(img, xs, ys)
    for q in range(20):
        np.testing.assert_allclose(out[:, q], sample_oracle(img, xs[q], ys[q]), atol=1e-12)


def test_bilinear_matches_torch_grid_sample(rng):
    torch = pytest.importorskip("torch")
    img = rng.normal(size=(3, 6, 7))
    xs = rng.uniform(-1, 7, size=(5, 5))
    ys = rng.uniform(-1, 6, size=(5, 5))
    grid = np.stack([2 * xs / 6 - 1, 2 * ys / 5 - 1], axis=-1)[None]
    ref = torch.nn.functional.grid_sample(torch.tensor(img[None]), torch.tensor(grid), mode="bilinear",
                                          padding_mode="border", align_corners=True)
    np.testing.assert_allclose(T.bilinear_sample(img, xs, ys), ref[0].numpy(), atol=1e-10)


def test_bilinear_coordinate_gradient_vs_central_differences(rng):
    img = rng.normal(size=(2, 5, 6))
    x, y = np.array([2.3]), np.array([1.7])
    g = rng.normal(size=(2, 1))
    _, gx, gy = T.bilinear_sample_backward(g, img, x, y)
    h = 1e-6

    def f(xv, yv):
        return float(np.sum(g * T.bilinear_sample(img, xv, yv)))

    fdx = (f(x + h, y) - f(x - h, y)) / (2 * h)
    fdy = (f(x, y + h) - f(x, y - h)) / (2 * h)
    assert abs(gx[0] - fdx) <= 1e-4 * max(abs(fdx), 1e-12)
    assert abs(gy[0] - fdy) <= 1e-4 * max(abs(fdy), 1e-12)


@given(st.floats(-2, 2), st.floats(-2, 2))
def test_bilinear_linear_in_image(alpha, beta):
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(2, 2, 5, 5))
    xs, ys = rng.uniform(-1, 5, size=(2, 7))
    lhs = T.bilinear_sample(alpha * a + beta * b, xs, ys)
    rhs = alpha * T.bilinear_sample(a, xs, ys) + beta * T.bilinear_sample(b, xs, ys)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


# ---------------------------------------------------------------------------
# pooling


def test_pool_and_upsample(rng):
    x = rng.normal(size=(2, 4, 6))
    p = T.avg_pool2(x)
    np.testing.assert_allclose(p[:, 1, 2], x[:, 2:4, 4:6].mean(axis=(1, 2)))
    u = T.upsample2(p)
    assert u.shape == x.shape
    np.testing.assert_array_equal(u[:, 3, 5], p[:, 1, 2])


# ---------------------------------------------------------------------------
# gradcheck harness


OPS = [
    (T.CONV2D, lambda r: [r.normal(size=(2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)]),
    (T.SIGMOID, lambda r: [r.normal(size=(2, 4, 4)) * 2]),
    (T.CHANNEL_SOFTMAX, lambda r: [r.normal(size=(5, 3, 3))]),
    (T.CONCAT, lambda r: [r.normal(size=(2, 3, 3)), r.normal(size=(1, 3, 3))]),
    (T.BILINEAR_SAMPLE, lambda r: [r.normal(size=(2, 5, 5)), r.uniform(0.1, 3.9, (4,)) + 0.01,
                                   r.uniform(0.1, 3.9, (4,)) + 0.01]),
    (T.AVG_POOL2, lambda r: [r.normal(size=(2, 4, 4))]),
    (T.UPSAMPLE2, lambda r: [r.normal(size=(2, 2, 3))]),
    (T.LEAKY_RELU, lambda r: [r.choice([-1, 1], size=(2, 4, 4)) * r.uniform(0.1, 2, (2, 4, 4))]),
]


@pytest.mark.parametrize("op,make", OPS, ids=[op.name for op, _ in OPS])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradcheck_primitives(op, make, seed):
    rep = T.gradcheck(op, make(np.random.default_rng(seed)), tolerance=1e-3, seed=seed)
    assert rep.passed, str(rep)


def test_gradcheck_concat_is_exact(rng):
    rep = T.gradcheck(T.CONCAT, [rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))])
    assert rep.max_error < 1e-8


def test_gradcheck_sigmoid_tight(rng):
    rep = T.gradcheck(T.SIGMOID, [rng.normal(size=(3, 4))], tolerance=1e-6)
    assert rep.passed, str(rep)


def test_gradcheck_detects_wrong_backward(rng):
    bad = T.DiffOp("bad", lambda x: x ** 2, lambda inp, g: (g * inp[0],))
    rep = T.gradcheck(bad, [rng.normal(size=(3, 3))])
    assert not rep.passed
    assert "FAIL" in str(rep)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gradcheck_rejects_non_finite():
    op = T.DiffOp("log", np.log, lambda inp, g: (g / inp[0],))
    with pytest.raises(NumericError):
        T.gradcheck(op, [np.array([-1.0, 2.0])])


@pytest.mark.parametrize("op,make", OPS, ids=[op.name for op, _ in OPS])
def test_zero_upstream_gives_zero_gradients(op, make):
    inputs = make(np.random.default_rng(3))
    out = op.forward(*inputs)
    for g, x in zip(op.backward(inputs, np.zeros_like(out)), inputs):
        if g is not None:
            assert np.shape(g) == np.shape(x)
            assert not np.any(g)
