"""Synthetic motion blur: ``blurred = k * sharp + noise``.

Kernels are anti-aliased straight-line PSFs; spatial variation comes from a
coarse grid of kernels whose responses are bilinearly blended between region
centres.  Noise is additive Gaussian.
"""

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import ConfigurationError, InputError
from .tensor import conv2d

logger = logging.getLogger(__name__)

MAX_KERNEL_LENGTH = 31
_SAMPLES_PER_PIXEL = 64


@dataclass
class BlurSpec:
    """Parametric degradation.

    ``regions`` optionally replaces the single kernel with a grid (list of
    rows) of BlurSpecs; only their kernels are used, noise always comes from
    the outer spec.
    """

    kind: str = "linear"
    length: float = 1.0
    angle: float = 0.0
    noise_sigma: float = 0.0
    regions: Optional[list] = None

    def __post_init__(self):
        if self.kind not in ("none", "linear"):
            raise ConfigurationError(f"unknown blur kind {self.kind!r}")
        if self.kind == "linear" and self.length < 1:
            raise ConfigurationError(f"blur length must be >= 1, got {self.length}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise sigma must be >= 0, got {self.noise_sigma}")

    def kernel(self, max_length=MAX_KERNEL_LENGTH):
        if self.kind == "none":
            return np.ones((1, 1))
        return motion_kernel(self.length, self.angle, max_length)

    def flat_regions(self):
        return [s for row in self.regions for s in row] if self.regions else [self]


def motion_kernel(length, angle, max_length=MAX_KERNEL_LENGTH):
    """Normalised PSF of a straight motion segment centred on the origin.

    The segment is supersampled; along its dominant axis each sample lands in
    the nearest pixel (exact box coverage), across it the sample is split
    linearly between the two neighbouring pixels.  The result is embedded in
    the smallest odd square and sums to one.
    """
    if length < 1:
        raise ConfigurationError(f"blur length must be >= 1, got {length}")
    if length > max_length:
        raise ConfigurationError(f"blur length {length} exceeds the maximum {max_length}")
    if length == 1:
        # a one-pixel exposure is a point; anti-aliasing across would smear it
        return np.ones((1, 1))
    c, s = math.cos(angle), math.sin(angle)
    if abs(c) < 1e-12:
        c = 0.0
    if abs(s) < 1e-12:
        s = 0.0
    n = max(1, int(math.ceil(length * _SAMPLES_PER_PIXEL)))
    t = (np.arange(n) + 0.5) / n * length - length / 2
    xs, ys = t * c, t * s
    x_major = abs(c) >= abs(s)
    major, minor = (xs, ys) if x_major else (ys, xs)
    m_idx = np.rint(major).astype(int)
    lo = np.floor(minor)
    frac = minor - lo
    lo = lo.astype(int)
    cells = np.concatenate([np.stack([m_idx, lo], 1), np.stack([m_idx, lo + 1], 1)])
    weights = np.concatenate([1 - frac, frac])
    keep = weights > 0
    cells, weights = cells[keep], weights[keep]
    radius = int(np.abs(cells).max())
    size = 2 * radius + 1
    k = np.zeros((size, size))
    if x_major:
        np.add.at(k, (cells[:, 1] + radius, cells[:, 0] + radius), weights)
    else:
        np.add.at(k, (cells[:, 0] + radius, cells[:, 1] + radius), weights)
    return k / k.sum()


def convolve(image, kernel):
    """True convolution of each channel of ``C x H x W`` with replicate border."""
    kernel = np.asarray(kernel, dtype=np.float64)
    flipped = kernel[::-1, ::-1].reshape(1, 1, *kernel.shape)
    x = np.asarray(image, dtype=np.float64)[None]
    return conv2d(x, flipped)[0]


def _blend_weights(n, size):
    """``(n, size)`` bilinear blending weights between ``n`` region centres."""
    if n == 1:
        return np.ones((1, size))
    centres = (np.arange(n) + 0.5) * size / n
    pos = np.clip(np.arange(size) + 0.5, centres[0], centres[-1])
    w = np.zeros((n, size))
    idx = np.clip(np.searchsorted(centres, pos, side="right") - 1, 0, n - 2)
    frac = (pos - centres[idx]) / (centres[idx + 1] - centres[idx])
    w[idx, np.arange(size)] = 1 - frac
    w[idx + 1, np.arange(size)] += frac
    return w


def apply_blur(sharp, spec, seed=0, clip=True):
    """Degrade ``sharp`` (``C x H x W`` in [0, 1]) according to ``spec``.

    Returns float64.  With ``clip=False`` the result is returned before
    clamping to [0, 1].
    """
    sharp = np.asarray(sharp, dtype=np.float64)
    if sharp.ndim != 3:
        raise InputError(f"expected C x H x W, got {sharp.shape}")
    _, H, W = sharp.shape
    if spec.regions:
        ry, rx = len(spec.regions), len(spec.regions[0])
        wy, wx = _blend_weights(ry, H), _blend_weights(rx, W)
        out = np.zeros_like(sharp)
        for i, row in enumerate(spec.regions):
            if len(row) != rx:
                raise ConfigurationError("blur region grid must be rectangular")
            for j, region in enumerate(row):
                alpha = wy[i][:, None] * wx[j][None, :]
                if alpha.any():
                    out += alpha * convolve(sharp, region.kernel())
    else:
        out = convolve(sharp, spec.kernel())
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0) if clip else out


# ---------------------------------------------------------------------------
# procedural sharp images


def procedural_texture(rng, size=64):
    """Piecewise-smooth colour image with hard edges, ``3 x size x size``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    ang = rng.uniform(0, 2 * np.pi)
    ramp = ((xx * np.cos(ang) + yy * np.sin(ang)) / size + 1) / 2
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(rng.integers(6, 14)):
        colour = rng.uniform(0, 1, 3)[:, None, None]
        kind = rng.integers(0, 4)
        cx, cy = rng.uniform(0, size, 2)
        if kind == 0:
            hw, hh = rng.uniform(2, size / 3, 2)
            mask = (np.abs(xx - cx) < hw) & (np.abs(yy - cy) < hh)
        elif kind == 1:
            rx, ry = rng.uniform(2, size / 4, 2)
            mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 < 1
        elif kind == 2:
            a = rng.uniform(0, np.pi)
            d = np.abs((xx - cx) * np.sin(a) - (yy - cy) * np.cos(a))
            mask = d < rng.uniform(0.5, 2.5)
        else:
            a = rng.uniform(0, np.pi)
            period = rng.uniform(3, 10)
            phase = (xx * np.cos(a) + yy * np.sin(a)) / period
            hw, hh = rng.uniform(4, size / 3, 2)
            mask = (np.sin(2 * np.pi * phase) > 0) & (np.abs(xx - cx) < hw) & (np.abs(yy - cy) < hh)
        img = np.where(mask[None], colour, img)
    return np.clip(img, 0, 1)


# ---------------------------------------------------------------------------
# dataset generation


@dataclass
class SpecRanges:
    """Sampling ranges for random spatially varying blur."""

    length: tuple = (1.0, 9.0)
    angle: tuple = (0.0, math.pi)
    sigma: tuple = (0.01, 0.01)
    grid: int = 2

    def sample(self, rng):
        regions = [[BlurSpec("linear", float(rng.uniform(*self.length)), float(rng.uniform(*self.angle)))
                    for _ in range(self.grid)] for _ in range(self.grid)]
        return BlurSpec("linear", regions[0][0].length, regions[0][0].angle,
                        float(rng.uniform(*self.sigma)), regions)


@dataclass
class SamplePair:
    id: str
    sharp_path: str
    blurred_path: str
    spec: BlurSpec
    seed: int
    sharp: Optional[np.ndarray] = field(default=None, repr=False)
    blurred: Optional[np.ndarray] = field(default=None, repr=False)

    def to_record(self):
        regions = self.spec.flat_regions()
        return "\t".join([
            f"id={self.id}",
            f"sharp={self.sharp_path}",
            f"blurred={self.blurred_path}",
            "length=" + ",".join(f"{r.length:.6f}" for r in regions),
            "angle=" + ",".join(f"{r.angle:.6f}" for r in regions),
            f"sigma={self.spec.noise_sigma:.6f}",
            f"seed={self.seed}",
        ])

    @classmethod
    def from_record(cls, line):
        kv = dict(item.split("=", 1) for item in line.rstrip("\n").split("\t"))
        lengths = [float(v) for v in kv["length"].split(",")]
        angles = [float(v) for v in kv["angle"].split(",")]
        g = int(round(math.sqrt(len(lengths))))
        regions = [[BlurSpec("linear", lengths[i * g + j], angles[i * g + j]) for j in range(g)]
                   for i in range(g)]
        spec = BlurSpec("linear", lengths[0], angles[0], float(kv["sigma"]), regions if g > 1 else None)
        return cls(kv["id"], kv["sharp"], kv["blurred"], spec, int(kv["seed"]))


def item_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def is_validation(sample_id, fraction=0.1):
    """Deterministic hash-based split; roughly ``fraction`` of ids are held out."""
    h = int.from_bytes(hashlib.sha256(sample_id.encode()).digest()[:8], "little")
    return (h % 1000) < int(round(fraction * 1000))


def augment(img, rng):
    """Random horizontal/vertical flips and 90-degree rotation of ``C x H x W``."""
    if rng.random() < 0.5:
        img = img[:, :, ::-1]
    if rng.random() < 0.5:
        img = img[:, ::-1, :]
    if rng.random() < 0.5:
        img = np.swapaxes(img, 1, 2)
    return np.ascontiguousarray(img)


def _load_sources(source_dir, patch):
    from .imageio import read_png_any

    images, skipped = [], 0
    for path in sorted(Path(source_dir).iterdir()):
        if not path.is_file():
            continue
        try:
            img = read_png_any(path)
        except Exception:
            skipped += 1
            continue
        if img.shape[1] < patch or img.shape[2] < patch:
            skipped += 1
            continue
        images.append(img)
    if skipped:
        logger.warning("skipped %d unreadable or undersized source images", skipped)
    return images, skipped


def generate_dataset(out_dir, count, ranges=None, seed=0, source_dir=None, patch=64):
    """Write ``count`` sharp/blurred PNG pairs and ``manifest.txt`` to ``out_dir``.

    Sharp patches are random crops of images in ``source_dir`` (or procedural
    textures when it is None), augmented with flips and 90-degree rotations.
    Returns the list of :class:`SamplePair` with image arrays attached.
    """
    from .imageio import quantize, write_png

    ranges = ranges or SpecRanges()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sources = None
    if source_dir is not None:
        sources, _ = _load_sources(source_dir, patch)
        if not sources:
            raise InputError(f"no usable source images in {source_dir}")
    pairs = []
    for i in range(count):
        s = item_seed(seed, i)
        rng = np.random.default_rng(s)
        if sources is None:
            sharp = procedural_texture(rng, patch)
        else:
            src = sources[rng.integers(len(sources))]
            y = rng.integers(0, src.shape[1] - patch + 1)
            x = rng.integers(0, src.shape[2] - patch + 1)
            sharp = src[:, y:y + patch, x:x + patch]
        sharp = quantize(augment(sharp, rng))
        spec = ranges.sample(rng)
        blurred = quantize(apply_blur(sharp, spec, seed=s))
        sid = f"{i:06d}"
        pair = SamplePair(sid, f"{sid}_sharp.png", f"{sid}_blurred.png", spec, s, sharp, blurred)
        write_png(out / pair.sharp_path, sharp)
        write_png(out / pair.blurred_path, blurred)
        pairs.append(pair)
    manifest = out / "manifest.txt"
    with open(manifest, "w", newline="\n") as fh:
        for pair in pairs:
            fh.write(pair.to_record() + "\n")
    return pairs


def read_manifest(path):
    with open(path) as fh:
        return [SamplePair.from_record(line) for line in fh if line.strip()]


def load_pairs(manifest_path):
    """Read a manifest and attach the images (float64 in [0, 1])."""
    from .imageio import read_png

    root = os.path.dirname(os.path.abspath(manifest_path))
    pairs = read_manifest(manifest_path)
    for p in pairs:
        p.sharp = read_png(os.path.join(root, p.sharp_path))
        p.blurred = read_png(os.path.join(root, p.blurred_path))
    return pairs
