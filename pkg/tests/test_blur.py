import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from miscfilter import blur
from miscfilter.blur import BlurSpec, SpecRanges
from miscfilter.exceptions import ConfigurationError


def convolve_oracle(img, k):
    """Direct true convolution with clamped indices."""
    C, H, W = img.shape
    r = k.shape[0] // 2
    out = np.zeros_like(img)
    for y in range(H):
        for x in range(W):
            for i in range(k.shape[0]):
                for j in range(k.shape[1]):
                    sy = min(max(y - (i - r), 0), H - 1)
                    sx = min(max(x - (j - r), 0), W - 1)
                    out[:, y, x] += k[i, j] * img[:, sy, sx]
    return out


def test_length_one_is_delta():
    for a in (0.0, 0.3, 1.7):
        np.testing.assert_array_equal(blur.motion_kernel(1, a), [[1.0]])


def test_horizontal_length_five():
    k = blur.motion_kernel(5, 0.0)
    assert k.shape == (5, 5)
    np.testing.assert_allclose(k[2], 0.2, atol=1e-12)
    assert k.sum() - k[2].sum() == 0


def test_vertical_is_transpose():
    np.testing.assert_allclose(blur.motion_kernel(5, math.pi / 2), blur.motion_kernel(5, 0.0).T, atol=1e-12)


@given(st.floats(1, 9), st.floats(0, math.pi))
def test_psf_normalised_nonnegative_odd(length, angle):
    k = blur.motion_kernel(length, angle)
    assert k.shape[0] == k.shape[1] and k.shape[0] % 2 == 1
    assert np.all(k >= 0)
    assert abs(k.sum() - 1) <= 1e-6


def test_psf_too_long_or_short():
    with pytest.raises(ConfigurationError):
        blur.motion_kernel(40, 0.0)
    with pytest.raises(ConfigurationError):
        blur.motion_kernel(0.5, 0.0)


def test_none_kind_without_noise_is_identity(rng):
    img = rng.uniform(size=(3, 12, 12))
    np.testing.assert_array_equal(blur.apply_blur(img, BlurSpec("none")), img)


def test_constant_image_unchanged(rng):
    img = np.full((3, 16, 16), 0.42)
    spec = SpecRanges(sigma=(0, 0)).sample(rng)
    np.testing.assert_allclose(blur.apply_blur(img, spec), 0.42, atol=1e-12)


def test_uniform_spec_matches_direct_convolution(rng):
    img = rng.uniform(size=(3, 14, 13))
    spec = BlurSpec("linear", 4.3, 0.7)
    np.testing.assert_allclose(blur.apply_blur(img, spec), convolve_oracle(img, spec.kernel()), atol=1e-6)


def test_spatial_variation_blends_region_kernels(rng):
    img = rng.uniform(size=(3, 32, 32))
    a, b = BlurSpec("linear", 7, 0.0), BlurSpec("linear", 7, math.pi / 2)
    spec = BlurSpec("linear", 7, 0.0, regions=[[a, b], [a, b]])
    out = blur.apply_blur(img, spec)
    # left columns (before the first region centre) see only kernel a, right only kernel b
    np.testing.assert_allclose(out[:, :, :8], blur.convolve(img, a.kernel())[:, :, :8], atol=1e-12)
    np.testing.assert_allclose(out[:, :, 24:], blur.convolve(img, b.kernel())[:, :, 24:], atol=1e-12)


@given(st.integers(0, 10_000))
def test_energy_conservation_interior(seed):
    rng = np.random.default_rng(seed)
    img = np.full((3, 64, 64), 0.5)
    img[:, 8:56, 8:56] = rng.uniform(size=(3, 48, 48))
    spec = SpecRanges(sigma=(0, 0)).sample(rng)
    out = blur.apply_blur(img, spec, clip=False)
    assert abs(out.mean() - img.mean()) <= 1e-4


def test_noise_statistics():
    img = np.full((3, 64, 64), 0.5)
    out = blur.apply_blur(img, BlurSpec("none", noise_sigma=0.05), seed=3, clip=False)
    var = np.var(out - img)
    assert abs(var - 0.05 ** 2) <= 0.1 * 0.05 ** 2


def test_blur_is_pure_function_of_seed(rng):
    img = rng.uniform(size=(3, 16, 16))
    spec = SpecRanges().sample(rng)
    np.testing.assert_array_equal(blur.apply_blur(img, spec, seed=5), blur.apply_blur(img, spec, seed=5))
    assert not np.array_equal(blur.apply_blur(img, spec, seed=5), blur.apply_blur(img, spec, seed=6))


def test_dataset_is_deterministic(tmp_path):
    blur.generate_dataset(tmp_path / "a", 6, seed=11, patch=32)
    blur.generate_dataset(tmp_path / "b", 6, seed=11, patch=32)
    ma = (tmp_path / "a" / "manifest.txt").read_bytes()
    assert ma == (tmp_path / "b" / "manifest.txt").read_bytes()
    for name in ("000003_sharp.png", "000003_blurred.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_empty_dataset(tmp_path):
    assert blur.generate_dataset(tmp_path, 0) == []
    assert (tmp_path / "manifest.txt").read_text() == ""
    assert blur.read_manifest(tmp_path / "manifest.txt") == []


def test_manifest_entries_in_range(tmp_path):
    pairs = blur.generate_dataset(tmp_path, 10, SpecRanges(length=(1, 9)), seed=2, patch=32)
    back = blur.load_pairs(tmp_path / "manifest.txt")
    assert [p.id for p in back] == [p.id for p in pairs]
    for p in back:
        assert all(1 <= r.length <= 9 for r in p.spec.flat_regions())
        assert p.sharp.shape == p.blurred.shape == (3, 32, 32)
    np.testing.assert_allclose(back[0].blurred, pairs[0].blurred, atol=0.5 / 255 + 1e-12)


def test_record_round_trip():
    spec = SpecRanges().sample(np.random.default_rng(0))
    pair = blur.SamplePair("000001", "s.png", "b.png", spec, 77)
    back = blur.SamplePair.from_record(pair.to_record())
    assert back.id == "000001" and back.seed == 77
    assert [round(r.length, 6) for r in back.spec.flat_regions()] == \
        [round(r.length, 6) for r in spec.flat_regions()]


def test_source_dir_skips_bad_images(tmp_path):
    from PIL import Image

    src = tmp_path / "src"
    src.mkdir()
    Image.fromarray(np.random.default_rng(0).integers(0, 255, (40, 40, 3), dtype=np.uint8)).save(src / "ok.png")
    Image.fromarray(np.zeros((10, 10, 3), np.uint8)).save(src / "tiny.png")
    (src / "broken.png").write_bytes(b"not an image")
    sources, skipped = blur._load_sources(src, 32)
    assert len(sources) == 1 and skipped == 2
    pairs = blur.generate_dataset(tmp_path / "out", 3, seed=0, source_dir=src, patch=32)
    assert len(pairs) == 3


def test_validation_split_fraction():
    ids = [f"{i:06d}" for i in range(2000)]
    frac = np.mean([blur.is_validation(i) for i in ids])
    assert 0.08 < frac < 0.12
    assert blur.is_validation("000123") == blur.is_validation("000123")
