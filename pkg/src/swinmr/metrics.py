"""Image quality metrics: PSNR, SSIM and the Frechet distance between feature Gaussians."""
import math
import warnings

import numpy as np
from scipy.signal import convolve2d

PSNR_DISPLAY_CAP = 100.0


def psnr(ref, test, data_range=None) -> float:
    """10 log10(data_range^2 / MSE). Identical images give ``inf``.

    ``data_range`` defaults to ``ref.max()``.
    """
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    if data_range is None:
        data_range = float(ref.max())
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def display_psnr(value: float) -> float:
    """Cap the infinite PSNR of identical images for tables and logs."""
    return min(value, PSNR_DISPLAY_CAP)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(ref, test, data_range=None, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all full 11x11 Gaussian windows (valid region).

    ``data_range`` defaults to ``ref.max()``.
    """
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape or ref.ndim != 2:
        raise ValueError(f"ssim needs two 2-d images of equal shape, got {ref.shape} and {test.shape}")
    if min(ref.shape) < win_size:
        raise ValueError(f"images must be at least {win_size}x{win_size}")
    if data_range is None:
        data_range = float(ref.max())
    if data_range <= 0:
        data_range = 1.0
    w = gaussian_window(win_size, sigma)

    def filt(a):
        return convolve2d(a, w, mode="valid")

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x, mu_y = filt(ref), filt(test)
    sxx = filt(ref * ref) - mu_x ** 2
    syy = filt(test * test) - mu_y ** 2
    sxy = filt(ref * test) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def _regularize(cov, jitter, name):
    if np.linalg.eigvalsh((cov + cov.T) / 2).min() > 0:
        return cov
    warnings.warn(f"{name} covariance is singular; adding {jitter:g} * I", RuntimeWarning, stacklevel=4)
    return cov + jitter * np.eye(cov.shape[0])


def gaussian_stats(features):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] < 2:
        raise ValueError("need at least 2 samples to estimate a covariance")
    return f.mean(axis=0), np.atleast_2d(np.cov(f, rowvar=False))


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b, jitter: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + tr(A + B - 2 (A B)^(1/2)).

    The matrix square root is taken as (sqrtA B sqrtA)^(1/2), which is
    symmetric PSD and has the same trace. Singular covariances get
    ``jitter * I`` added, with a warning.
    """
    cov_a = np.atleast_2d(cov_a).astype(np.float64)
    cov_b = np.atleast_2d(cov_b).astype(np.float64)
    cov_a = _regularize(cov_a, jitter, "first")
    cov_b = _regularize(cov_b, jitter, "second")
    sa = _psd_sqrt(cov_a)
    cross = _psd_sqrt(sa @ cov_b @ sa)
    diff = np.asarray(mu_a, dtype=np.float64) - np.asarray(mu_b, dtype=np.float64)
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def frechet_distance(features_a, features_b) -> float:
    """Frechet distance between Gaussians fitted to two sets of feature vectors [n, d]."""
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    da = fa.shape[1] if fa.ndim == 2 else 1
    db = fb.shape[1] if fb.ndim == 2 else 1
    if da != db:
        raise ValueError(f"feature dimensionality differs: {da} vs {db}")
    return frechet_from_stats(*gaussian_stats(fa), *gaussian_stats(fb))
