"""The shared 5x5 Gaussian low-pass used for targets and mask blurring."""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def gaussian_kernel_5x5(sigma: float = 2.5) -> np.ndarray:
    """Discrete 5x5 kernel exp(-(x^2+y^2)/(2 sigma^2)) normalized to sum 1."""
    ax = np.arange(-2, 3, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax, indexing="ij")
    k = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma ** 2))
    return (k / k.sum()).astype(np.float32)


def gaussian_blur(image: np.ndarray, sigma: float = 2.5) -> np.ndarray:
    """Blur with the 5x5 kernel under reflective (edge-repeating) padding."""
    img = np.asarray(image, dtype=np.float32)
    kernel = gaussian_kernel_5x5(sigma)
    # the kernel is symmetric, so correlate == convolve
    return ndimage.correlate(img, kernel, mode="reflect").astype(np.float32)
