"""Image quality metrics."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

WINDOW = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter(img: np.ndarray) -> np.ndarray:
    # zero-padded separable filter over the two spatial axes
    g = gaussian_window()
    out = correlate1d(img, g, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, g, axis=1, mode="constant", cval=0.0)


def ssim_terms(a: np.ndarray, b: np.ndarray, data_range: float = 1.0):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a, mu_b = _filter(a), _filter(b)
    e_aa, e_bb, e_ab = _filter(a * a), _filter(b * b), _filter(a * b)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num1 = 2.0 * mu_a * mu_b + c1
    num2 = 2.0 * cov + c2
    den1 = mu_a * mu_a + mu_b * mu_b + c1
    den2 = var_a + var_b + c2
    return dict(mu_a=mu_a, mu_b=mu_b, num1=num1, num2=num2, den1=den1, den2=den2,
                map=(num1 * num2) / (den1 * den2))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), zero padding at the borders."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(ssim_terms(a, b, data_range)["map"]))


def ssim_grad(a, b, data_range: float = 1.0):
    """SSIM value and its gradient with respect to ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    t = ssim_terms(a, b, data_range)
    n = a.size
    num1, num2, den1, den2 = t["num1"], t["num2"], t["den1"], t["den2"]
    mu_a, mu_b = t["mu_a"], t["mu_b"]
    # S = num1 num2 / (den1 den2); partials w.r.t. mu_a, E[a^2], E[ab]
    s = t["map"]
    d_num1 = num2 / (den1 * den2)
    d_num2 = num1 / (den1 * den2)
    d_den1 = -s / den1
    d_den2 = -s / den2
    # num1 = 2 mu_a mu_b + c1; num2 = 2 (E_ab - mu_a mu_b) + c2
    # den1 = mu_a^2 + mu_b^2 + c1; den2 = E_aa - mu_a^2 + E_bb - mu_b^2 + c2
    g_mu = (d_num1 * 2.0 * mu_b - d_num2 * 2.0 * mu_b + d_den1 * 2.0 * mu_a
            - d_den2 * 2.0 * mu_a) / n
    g_eaa = d_den2 / n
    g_eab = 2.0 * d_num2 / n
    # the zero-padded symmetric filter is self-adjoint
    grad = _filter(g_mu) + 2.0 * a * _filter(g_eaa) + b * _filter(g_eab)
    return float(np.mean(s)), grad


def mse(a, b) -> float:
    return float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))


def psnr(a, b) -> float:
    """PSNR in dB for [0, 1] images; identical images give +inf."""
    err = mse(a, b)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / err))
