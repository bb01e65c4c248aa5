import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dehazekit import oracles
from dehazekit.config import LossWeights
from dehazekit.metrics import combined_loss, psnr, ssim
from dehazekit.numerics import ShapeError


class TestPsnr:
    def test_identical_is_inf(self, rng):
        x = rng.random((1, 3, 4, 4))
        assert psnr(x, x) == math.inf

    def test_constant_error(self, rng):
        x = rng.random((1, 3, 8, 8))
        assert abs(psnr(x, x + 0.1) - 20.0) < 1e-6

    def test_formula(self, rng):
        x, y = rng.random((3, 9, 9)), rng.random((3, 9, 9))
        mse = math.fsum(((x - y) ** 2).ravel().tolist()) / x.size
        assert psnr(x, y) == pytest.approx(10 * math.log10(1 / mse), rel=1e-12)
        assert psnr(x * 255, y * 255, peak=255) == pytest.approx(psnr(x, y), rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 9999), s=st.floats(0.05, 0.95))
    def test_monotone(self, seed, s):
        r = np.random.default_rng(seed)
        x, e = r.random((8, 8)), r.standard_normal((8, 8))
        assert psnr(x, x + s * e) > psnr(x, x + e)


class TestSsim:
    def test_self(self, rng):
        x = rng.random((1, 3, 16, 16))
        assert abs(ssim(x, x) - 1) < 1e-6

    def test_anticorrelated(self):
        yy, xx = np.mgrid[:32, :32]
        x = ((yy // 4 + xx // 4) % 2).astype(float)
        assert ssim(x, 1 - x) < 0.5

    def test_window_oracle(self, rng):
        x = rng.random((32, 32))
        y = np.clip(x + 0.1 * rng.standard_normal((32, 32)), 0, 1)
        assert ssim(x, y) == pytest.approx(oracles.ssim_loop(x, y), abs=1e-12)

    def test_rgb_grayscale_and_per_channel(self, rng):
        x, y = rng.random((1, 3, 14, 13)), rng.random((1, 3, 14, 13))
        assert ssim(x, y) == pytest.approx(oracles.ssim_loop(x[0].mean(0), y[0].mean(0)), abs=1e-12)
        per = np.mean([oracles.ssim_loop(x[0, c], y[0, c]) for c in range(3)])
        assert ssim(x, y, per_channel=True) == pytest.approx(per, abs=1e-12)

    def test_matches_scikit_image(self, rng):
        metrics = pytest.importorskip("skimage.metrics")
        x = rng.random((40, 30))
        y = np.clip(x + 0.2 * rng.standard_normal(x.shape), 0, 1)
        ref = metrics.structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                            use_sample_covariance=False)
        assert ssim(x, y) == pytest.approx(ref, abs=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 9999))
    def test_symmetric_and_bounded(self, seed):
        r = np.random.default_rng(seed)
        x, y = r.random((12, 12)), r.random((12, 12))
        s = ssim(x, y)
        assert abs(s - ssim(y, x)) < 1e-9 and -1 <= s <= 1

    def test_too_small(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((10, 20)), np.zeros((10, 20)))
        with pytest.raises(ShapeError):
            ssim(np.zeros((12, 12)), np.zeros((12, 13)))


class TestLoss:
    def test_defaults(self):
        w = LossWeights()
        assert (w.w_l1, w.w_mse, w.w_ssim) == (0.8, 0.1, 0.1)

    def test_zero_at_target(self, rng):
        x = rng.random((1, 3, 16, 16))
        assert abs(combined_loss(x, x)) < 1e-7

    def test_constant_offset_parts(self, rng):
        x = rng.random((1, 3, 16, 16)) * 0.5
        no_ssim = LossWeights(0.8, 0.1, 0.0)
        assert combined_loss(x + 0.1, x, no_ssim) == pytest.approx(0.08 + 0.001, abs=1e-12)

    def test_components(self, rng):
        p, t = rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 16))
        d = p - t
        want = 0.8 * np.abs(d).mean() + 0.1 * (d ** 2).mean() + 0.1 * (1 - oracles.ssim_loop(p[0].mean(0), t[0].mean(0)))
        assert combined_loss(p, t) == pytest.approx(want, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 9999), delta=st.floats(1e-3, 1))
    def test_positive_off_target(self, seed, delta):
        r = np.random.default_rng(seed)
        x = r.random((12, 12))
        y = x.copy()
        y[r.integers(12), r.integers(12)] += delta
        assert combined_loss(y, x) > 1e-7
