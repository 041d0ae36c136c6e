from __future__ import annotations

import math

import numpy as np
import pytest

from face_dualdict.degrade import (
    Q_GRID,
    R_GRID,
    RHO_GRID,
    SIGMA_GRID,
    DegradationParams,
    apply_degradation,
    degrade_image,
    downsample_size,
    gaussian_kernel,
    jpeg_roundtrip,
    parse_task,
    sample_params,
)
from face_dualdict.errors import EncodeError, UsageError
from face_dualdict.evalkit import psnr
from face_dualdict.imagedata import load_aligned_image


@pytest.fixture(scope="module")
def toy_images(toy_root):
    return [load_aligned_image(p, 64) for p in sorted(toy_root.glob("*/*.png"))]


# -----------------------------
# 参数抽样
# -----------------------------
def test_random_params_stay_on_grid():
    for seed in range(1000):
        p = sample_params(seed, "random")
        assert p.rho in RHO_GRID
        assert p.r in R_GRID
        assert p.sigma in SIGMA_GRID
        assert p.q in Q_GRID


def test_random_params_cover_grid_ends():
    params = [sample_params(seed) for seed in range(2000)]
    assert min(p.sigma for p in params) == 0 and max(p.sigma for p in params) == 15
    assert min(p.q for p in params) == 50 and max(p.q for p in params) == 100


def test_fixed_scale_tasks():
    for seed in range(50):
        assert sample_params(seed, "x4").r == 4.0
        assert sample_params(seed, "x8").r == 8.0


def test_same_seed_same_params():
    assert sample_params(7) == sample_params(7)
    assert set(sample_params(7).to_dict()) == {"rho", "r", "sigma", "q"}


def test_unknown_task():
    with pytest.raises(UsageError):
        parse_task("x3")


# -----------------------------
# 模糊核
# -----------------------------
@pytest.mark.parametrize("rho", [1.0, 1.5, 2.3, 3.0])
def test_kernel_normalized_and_symmetric(rho):
    k = gaussian_kernel(rho)
    assert k.shape == (2 * math.ceil(3 * rho) + 1,) * 2
    assert k.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(k, k.T)
    assert np.array_equal(k, k[::-1])
    assert np.array_equal(k, np.rot90(k))


def test_kernel_center_to_neighbor_ratio():
    k = gaussian_kernel(1.0)
    assert k[3, 3] / k[3, 4] == pytest.approx(math.exp(0.5), rel=1e-9)


def test_kernel_rejects_non_positive():
    with pytest.raises(UsageError):
        gaussian_kernel(0.0)


# -----------------------------
# JPEG
# -----------------------------
@pytest.mark.parametrize("q", [50, 75, 100])
def test_jpeg_keeps_mid_gray(q):
    img = np.full((16, 16, 3), 128 / 255, np.float32)
    assert np.abs(jpeg_roundtrip(img, q) - img).max() < 1 / 255


def test_jpeg_quality_orders_fidelity(toy_images):
    img = toy_images[0]
    high = psnr(jpeg_roundtrip(img, 100), img)
    low = psnr(jpeg_roundtrip(img, 50), img)
    assert high > 40
    assert high > low


def test_jpeg_rejects_bad_input():
    with pytest.raises(UsageError):
        jpeg_roundtrip(np.zeros((8, 8, 3), np.float32), 0)
    with pytest.raises(UsageError):
        jpeg_roundtrip(np.zeros((8, 8, 3), np.float32), 101)
    with pytest.raises(EncodeError):
        jpeg_roundtrip(np.zeros((0, 4, 3), np.float32), 90)


# -----------------------------
# 完整退化
# -----------------------------
def test_mild_degradation_is_close(toy_images):
    img = toy_images[0]
    out = apply_degradation(img, DegradationParams(1.0, 1.0, 0, 100), seed=0, output_size=64)
    assert float(np.abs(out - img).mean()) < 0.03


def test_noise_level_on_flat_image():
    img = np.full((64, 64, 3), 0.5, np.float32)
    out = apply_degradation(img, DegradationParams(1.0, 1.0, 15, 100), seed=3, output_size=64)
    assert 13.0 <= float((out.astype(np.float64) * 255).std()) <= 17.0


def test_large_factor_sizes(toy_images):
    assert downsample_size(64, 8) == 8
    out = apply_degradation(toy_images[0], DegradationParams(2.0, 8.0, 5, 80), seed=1, output_size=64)
    assert out.shape == (64, 64, 3)
    assert out.dtype == np.float32
    assert 0.0 <= out.min() and out.max() <= 1.0


def test_degradation_is_bit_identical_for_same_seed(toy_images):
    a, pa = degrade_image(toy_images[1], 42, "random", 64)
    b, pb = degrade_image(toy_images[1], 42, "random", 64)
    assert pa == pb
    assert np.array_equal(a, b)
    c, _ = degrade_image(toy_images[1], 43, "random", 64)
    assert not np.array_equal(a, c)


def test_more_noise_lowers_mean_psnr(toy_images):
    pairs = [(img, s) for img in toy_images for s in (0, 1)]
    assert len(pairs) >= 50
    means = []
    for sigma in (0, 5, 10, 15):
        p = DegradationParams(1.5, 2.0, sigma, 90)
        means.append(np.mean([psnr(apply_degradation(img, p, s, 64), img) for img, s in pairs]))
    assert all(a > b for a, b in zip(means, means[1:]))
