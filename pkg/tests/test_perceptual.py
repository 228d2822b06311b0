"""Multi-scale structural dissimilarity proxy and its analytic gradient."""

import numpy as np
import pytest

from splatedit.perceptual import perceptual_proxy, perceptual_proxy_with_grad


def _smooth(rng, h, w, c=3):
    """Band-limited random image: structure at scales the proxy can see."""
    img = rng.uniform(0, 1, (h, w, c))
    for _ in range(3):
        img = 0.25 * (np.roll(img, 1, 0) + np.roll(img, -1, 0)
                      + np.roll(img, 1, 1) + np.roll(img, -1, 1))
    return img


class TestValue:
    def test_exact_zero_at_equality(self, rng):
        img = rng.uniform(0, 1, (16, 16, 3))
        assert perceptual_proxy(img, img.copy()) == 0.0
        val, grad = perceptual_proxy_with_grad(img, img.copy())
        assert val == 0.0
        assert not np.any(grad)

    def test_symmetric(self, rng):
        a, b = _smooth(rng, 16, 16), _smooth(rng, 16, 16)
        assert perceptual_proxy(a, b) == pytest.approx(perceptual_proxy(b, a),
                                                       rel=1e-12)

    def test_constant_black_vs_white_is_near_maximal(self):
        a = np.zeros((16, 16, 3))
        b = np.ones((16, 16, 3))
        assert perceptual_proxy(a, b) > 0.9

    def test_positive_for_distinct_images(self, rng):
        a, b = _smooth(rng, 16, 16), _smooth(rng, 16, 16)
        assert perceptual_proxy(a, b) > 0.0

    def test_more_tolerant_of_shift_than_l2(self, rng):
        # relative to each metric's full range (constant 0 vs constant 1),
        # a one-pixel shift of a textured image registers lower on the proxy
        yy, xx = np.mgrid[0:32, 0:32] / 32.0
        base = np.stack([
            0.5 + 0.3 * np.sin(2 * np.pi * (2 * xx + yy)),
            0.5 + 0.3 * np.cos(2 * np.pi * (xx - 2 * yy)),
            0.5 + 0.25 * np.sin(2 * np.pi * (xx + yy) + 1.0),
        ], axis=-1)
        detail = rng.uniform(-0.05, 0.05, base.shape)
        for _ in range(2):
            detail = 0.25 * (np.roll(detail, 1, 0) + np.roll(detail, -1, 0)
                             + np.roll(detail, 1, 1) + np.roll(detail, -1, 1))
        tex = np.clip(base + detail, 0, 1)
        shifted = np.roll(tex, 1, axis=1)
        proxy_range = perceptual_proxy(np.zeros_like(tex), np.ones_like(tex))
        l2_range = 1.0
        rel_proxy = perceptual_proxy(tex, shifted) / proxy_range
        rel_l2 = np.sqrt(np.mean((tex - shifted) ** 2)) / l2_range
        assert rel_proxy < rel_l2

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            perceptual_proxy(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))

    def test_single_channel_input(self, rng):
        a, b = _smooth(rng, 16, 16, 1), _smooth(rng, 16, 16, 1)
        assert 0.0 < perceptual_proxy(a, b) < 1.0


class TestWeight:
    def test_uniform_weight_matches_unweighted_value(self, rng):
        a, b = _smooth(rng, 16, 16), _smooth(rng, 16, 16)
        w = np.ones((16, 16))
        assert perceptual_proxy(a, b, weight=w) == perceptual_proxy(a, b)

    def test_zero_weight_region_is_ignored(self, rng):
        a = _smooth(rng, 16, 16)
        b = a.copy()
        b[:8] = rng.uniform(0, 1, (8, 16, 3))  # corrupt only the top half
        w = np.ones((16, 16))
        w[:8] = 0.0
        masked = perceptual_proxy(a, b, weight=w)
        full = perceptual_proxy(a, b)
        assert masked < full
        # blur taps leak a few rows past the boundary, nothing more
        assert masked < 0.25 * full

    def test_weight_shape_validated(self, rng):
        a = _smooth(rng, 16, 16)
        with pytest.raises(ValueError):
            perceptual_proxy(a, a + 0.1, weight=np.ones((8, 8)))


class TestGradient:
    def test_matches_finite_differences(self, rng):
        a = _smooth(rng, 12, 12)
        b = _smooth(rng, 12, 12)
        _, grad = perceptual_proxy_with_grad(a, b)
        h = 1e-6
        worst = 0.0
        for _ in range(40):
            i, j, c = rng.integers(12), rng.integers(12), rng.integers(3)
            ap = a.copy(); ap[i, j, c] += h
            am = a.copy(); am[i, j, c] -= h
            fd = (perceptual_proxy(ap, b) - perceptual_proxy(am, b)) / (2 * h)
            rel = abs(fd - grad[i, j, c]) / max(1e-8, abs(fd), abs(grad[i, j, c]))
            worst = max(worst, rel)
        assert worst <= 1e-4, f"worst relative gradient error {worst:.3e}"

    def test_weighted_gradient_matches_finite_differences(self, rng):
        a = _smooth(rng, 12, 12)
        b = _smooth(rng, 12, 12)
        w = rng.uniform(0, 1, (12, 12))
        _, grad = perceptual_proxy_with_grad(a, b, weight=w)
        h = 1e-6
        for _ in range(20):
            i, j, c = rng.integers(12), rng.integers(12), rng.integers(3)
            ap = a.copy(); ap[i, j, c] += h
            am = a.copy(); am[i, j, c] -= h
            fd = (perceptual_proxy(ap, b, weight=w)
                  - perceptual_proxy(am, b, weight=w)) / (2 * h)
            assert abs(fd - grad[i, j, c]) <= 1e-4 * max(1.0, abs(fd))

    def test_gradient_shape_follows_input(self, rng):
        a2, b2 = _smooth(rng, 8, 8, 1)[:, :, 0], _smooth(rng, 8, 8, 1)[:, :, 0]
        _, g = perceptual_proxy_with_grad(a2, b2)
        assert g.shape == (8, 8)
        a3, b3 = _smooth(rng, 8, 8), _smooth(rng, 8, 8)
        _, g3 = perceptual_proxy_with_grad(a3, b3)
        assert g3.shape == (8, 8, 3)

    def test_descent_direction_reduces_value(self, rng):
        a = _smooth(rng, 16, 16)
        b = _smooth(rng, 16, 16)
        val, grad = perceptual_proxy_with_grad(a, b)
        stepped = perceptual_proxy(a - 1e-3 * grad / max(1e-12, np.abs(grad).max()), b)
        assert stepped < val
