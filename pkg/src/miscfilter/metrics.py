"""Image quality metrics: PSNR and SSIM."""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InputError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def psnr(a, b, max_val=1.0):
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(max_val ** 2 / mse))


def to_luma(img):
    """ITU-R 601 luma of a ``3 x H x W`` image; 2D input passes through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim != 3 or img.shape[0] != 3:
        raise InputError(f"expected 3 x H x W or H x W, got {img.shape}")
    return np.tensordot(LUMA_WEIGHTS, img, axes=(0, 0))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    n = len(g)
    H, W = x.shape
    rows = sum(g[i] * x[i:H - n + 1 + i, :] for i in range(n))
    return sum(g[j] * rows[:, j:W - n + 1 + j] for j in range(n))


def ssim(a, b, win_size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean structural similarity of the luma channels.

    Local statistics use a separable Gaussian window evaluated only where it
    fits entirely inside the image.
    """
    x = to_luma(a)
    y = to_luma(b)
    if x.shape != y.shape:
        raise InputError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < win_size:
        raise InputError(f"image {x.shape} smaller than the {win_size}x{win_size} SSIM window")
    g = gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx = _filter_valid(x, g)
    my = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM with aggregate means."""

    names: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, name, pred, target):
        self.names.append(name)
        self.psnr.append(psnr(pred, target))
        self.ssim.append(ssim(pred, target))

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def lines(self):
        for name, p, s in zip(self.names, self.psnr, self.ssim):
            yield f"image={name} psnr={format_db(p)} ssim={s:.6f}"
        yield f"image=MEAN psnr={format_db(self.mean_psnr)} ssim={self.mean_ssim:.6f}"


def format_db(value):
    return "inf" if np.isinf(value) else f"{value:.4f}"
