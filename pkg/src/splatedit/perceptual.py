"""Multi-scale structural dissimilarity with an analytic gradient.

The proxy is the mean over 3 dyadic scales of (1 - SSIM), computed with a
7-tap Gaussian window (sigma 1.5) and the standard constants C1 = 0.01^2,
C2 = 0.03^2 for unit-range data. Windowing uses zero padding so the blur
operator is exactly self-adjoint, which keeps the hand-derived gradient
exact; the test suite pins it against finite differences.

An optional per-pixel weight map scales each pixel's contribution; weights
are average-pooled alongside the images. A weight map of ones reproduces
the unweighted value bit for bit (multiplication by 1.0 is exact).
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

__all__ = ["perceptual_proxy", "perceptual_proxy_with_grad"]

_C1 = 0.01**2
_C2 = 0.03**2
_SCALES = 3

_offsets = np.arange(-3, 4)
_KERNEL = np.exp(-0.5 * (_offsets / 1.5) ** 2)
_KERNEL /= _KERNEL.sum()


def _blur(x: np.ndarray) -> np.ndarray:
    """Separable symmetric Gaussian blur, zero padded (self-adjoint)."""
    out = correlate1d(x, _KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _KERNEL, axis=1, mode="constant", cval=0.0)


def _pool(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling; odd trailing rows/columns are dropped."""
    h, w = x.shape[0] & ~1, x.shape[1] & ~1
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _unpool(g: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _pool: spread each value over its 2x2 source block / 4."""
    out = np.zeros(shape)
    h2, w2 = g.shape[0], g.shape[1]
    for dr in (0, 1):
        for dc in (0, 1):
            out[dr:2 * h2:2, dc:2 * w2:2] = 0.25 * g
    return out


def _ssim_level(a, b, w, want_grad):
    """One scale: returns (weighted mean of 1 - SSIM, grad wrt a or None)."""
    mu_a, mu_b = _blur(a), _blur(b)
    e_aa, e_bb, e_ab = _blur(a * a), _blur(b * b), _blur(a * b)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    n1 = 2.0 * mu_a * mu_b + _C1
    n2 = 2.0 * cov + _C2
    d1 = mu_a**2 + mu_b**2 + _C1
    d2 = var_a + var_b + _C2
    ssim = (n1 * n2) / (d1 * d2)
    count = ssim.size
    if w is None:
        val = float(np.sum(1.0 - ssim)) / count
    else:
        val = float(np.sum(w * (1.0 - ssim))) / count
    if not want_grad:
        return val, None

    d_s = -1.0 / count if w is None else -w / count  # dval/dssim per pixel
    inv_dd = 1.0 / (d1 * d2)
    a1 = d_s * n2 * inv_dd
    a2 = d_s * n1 * inv_dd
    a3 = -d_s * ssim / d1
    a4 = -d_s * ssim / d2
    g_mu_a = 2.0 * (mu_b * (a1 - a2) + mu_a * (a3 - a4))
    grad = _blur(g_mu_a) + 2.0 * a * _blur(a4) + b * _blur(2.0 * a2)
    return val, grad


def _proxy(a: np.ndarray, b: np.ndarray, weight, want_grad: bool):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    w = None
    if weight is not None:
        w = np.asarray(weight, dtype=np.float64)
        if w.ndim == 3:
            w = w[:, :, 0]
        if w.shape != a.shape[:2]:
            raise ValueError(f"weight shape {w.shape} != image {a.shape[:2]}")

    # the dissimilarity is minimized exactly at a == b, so the analytic
    # gradient there is zero; short-circuit to avoid returning the float
    # cancellation residue (~1e-18) that a naive evaluation would produce
    if np.array_equal(a, b):
        return 0.0, (np.zeros_like(a) if want_grad else None)

    channels = a.shape[2]
    vals = []
    grads = [None] * channels
    for ch in range(channels):
        la, lb, lw = a[:, :, ch], b[:, :, ch], w
        shapes = []
        level_grads = []
        total = 0.0
        for s in range(_SCALES):
            v, g = _ssim_level(la, lb, lw, want_grad)
            total += v
            shapes.append(la.shape)
            level_grads.append(g)
            if s + 1 < _SCALES:
                la, lb = _pool(la), _pool(lb)
                lw = None if lw is None else _pool(lw)
        vals.append(total / _SCALES)
        if want_grad:
            g = level_grads[-1]
            for s in range(_SCALES - 2, -1, -1):
                g = _unpool(g, shapes[s]) + level_grads[s]
            grads[ch] = g / _SCALES
    value = float(np.mean(vals))
    if not want_grad:
        return value, None
    grad = np.stack(grads, axis=-1) / channels
    return value, grad


def perceptual_proxy(a: np.ndarray, b: np.ndarray, weight=None) -> float:
    """Mean over 3 dyadic scales of weighted (1 - SSIM); 0 iff a == b."""
    return _proxy(a, b, weight, want_grad=False)[0]


def perceptual_proxy_with_grad(a: np.ndarray, b: np.ndarray, weight=None):
    """(value, d value / d a). Gradient shape matches a."""
    val, grad = _proxy(a, b, weight, want_grad=True)
    if np.asarray(a).ndim == 2:
        grad = grad[:, :, 0]
    return val, grad
