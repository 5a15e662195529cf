"""Centered, orthonormal 2D Fourier transforms over the last two axes."""
import numpy as np


def fft2c(x, axes=(-2, -1)):
    """Centered orthonormal 2D FFT. DC ends up at index (H // 2, W // 2)."""
    x = np.fft.ifftshift(x, axes=axes)
    x = np.fft.fft2(x, axes=axes, norm="ortho")
    return np.fft.fftshift(x, axes=axes)


def ifft2c(x, axes=(-2, -1)):
    """Inverse of :func:`fft2c` (and its adjoint, since the transform is unitary)."""
    x = np.fft.ifftshift(x, axes=axes)
    x = np.fft.ifft2(x, axes=axes, norm="ortho")
    return np.fft.fftshift(x, axes=axes)
