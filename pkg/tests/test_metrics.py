import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from miscfilter import metrics
from miscfilter.exceptions import InputError


def ssim_oracle(a, b):
    """Independent SSIM via scipy's separable Gaussian filter, cropped to valid windows."""
    from scipy.ndimage import correlate1d

    g = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5 ** 2))
    g /= g.sum()
    luma = np.array([0.299, 0.587, 0.114])
    x = np.einsum("c,chw->hw", luma, a)
    y = np.einsum("c,chw->hw", luma, b)

    def filt(z):
        z = correlate1d(correlate1d(z, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return z[5:-5, 5:-5]

    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mx, my = filt(x), filt(y)
    vx, vy, cxy = filt(x * x) - mx ** 2, filt(y * y) - my ** 2, filt(x * y) - mx * my
    return float(np.mean((2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))))


def test_psnr_identical_is_inf(rng):
    a = rng.uniform(size=(3, 8, 8))
    assert metrics.psnr(a, a) == math.inf
    assert metrics.format_db(metrics.psnr(a, a)) == "inf"


def test_psnr_uniform_difference_is_20db(rng):
    a = rng.uniform(0, 0.9, size=(3, 16, 16))
    assert abs(metrics.psnr(a, a + 0.1) - 20.0) <= 1e-4


def test_psnr_matches_direct_formula(rng):
    a, b = rng.uniform(size=(2, 3, 10, 12))
    ref = 10 * math.log10(1 / np.mean((a - b) ** 2))
    assert abs(metrics.psnr(a, b) - ref) <= 1e-9


def test_ssim_self_is_one(rng):
    a = rng.uniform(size=(3, 20, 20))
    assert abs(metrics.ssim(a, a) - 1.0) <= 1e-9


@given(st.floats(0, 0.5), st.floats(0, 0.5))
def test_ssim_constant_closed_form(c, d):
    a = np.full((3, 16, 16), c)
    b = np.full((3, 16, 16), c + d)
    c1 = 0.01 ** 2
    closed = (2 * c * (c + d) + c1) / (c * c + (c + d) ** 2 + c1)
    assert abs(metrics.ssim(a, b) - closed) <= 1e-6


def test_ssim_symmetric_and_matches_oracle(rng):
    a, b = rng.uniform(size=(2, 3, 24, 19))
    s = metrics.ssim(a, b)
    assert s == pytest.approx(metrics.ssim(b, a), abs=1e-15)
    assert abs(s - ssim_oracle(a, b)) <= 1e-6


def test_ssim_matches_scikit_image(rng):
    skm = pytest.importorskip("skimage.metrics")
    a = rng.uniform(size=(3, 32, 32))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    x, y = metrics.to_luma(a), metrics.to_luma(b)
    ref = skm.structural_similarity(x, y, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                    data_range=1.0, full=True)[1][5:-5, 5:-5].mean()
    assert abs(metrics.ssim(a, b) - ref) <= 1e-6


def test_ssim_rejects_small_images():
    with pytest.raises(InputError):
        metrics.ssim(np.zeros((3, 10, 20)), np.zeros((3, 10, 20)))


def test_report_lines(rng):
    rep = metrics.MetricReport()
    a = rng.uniform(size=(3, 12, 12))
    rep.add("same", a, a)
    rep.add("other", a, np.clip(a + 0.1, 0, 1))
    lines = list(rep.lines())
    assert lines[0].startswith("image=same psnr=inf ssim=1.000000")
    assert lines[-1].startswith("image=MEAN psnr=inf")
