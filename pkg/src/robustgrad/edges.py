"""Image-derivative filters and oriented edge energy (numpy, no tape).

Energy maps serve two roles: the constant alignment target of the edge
regularizer and a diagnostic feature. Neither needs derivatives through
the filter, so everything here is plain numpy. Filtering uses replicate
padding so border pixels see extended, not zeroed, context.
"""

from __future__ import annotations

import numpy as np

__all__ = ["sobel_kernels", "gaussian_derivative_kernels", "oriented_energy_map"]

_SOBEL_U = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def sobel_kernels():
    """(g_u, g_v): horizontal and vertical derivative kernels, correlation convention."""
    return _SOBEL_U.copy(), _SOBEL_U.T.copy()


def gaussian_derivative_kernels(sigma):
    """First-derivative-of-Gaussian pair; kernel radius 3 sigma (minimum 1)."""
    if sigma <= 0:
        raise ValueError("gaussian-derivative sigma must be positive")
    radius = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    g /= g.sum()
    dg = -(t / sigma**2) * g
    g_u = np.outer(g, dg)
    return g_u, g_u.T.copy()


def _correlate_replicate(img, kernel):
    """2-D valid correlation after replicate padding; img [H,W]."""
    kh, kw = kernel.shape
    padded = np.pad(img, ((kh // 2, kh - 1 - kh // 2), (kw // 2, kw - 1 - kw // 2)),
                    mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw))
    return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))


def oriented_energy_map(x, kernels):
    """|g_u*x|^2 + |g_v*x|^2 summed over channels; x [C,H,W] -> [H,W]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected [C,H,W], got shape {x.shape}")
    if x.shape[1] < 3 or x.shape[2] < 3:
        raise ValueError("image smaller than 3x3")
    g_u, g_v = kernels
    energy = np.zeros(x.shape[1:], dtype=np.float64)
    for channel in x:
        du = _correlate_replicate(channel, g_u)
        dv = _correlate_replicate(channel, g_v)
        energy += du * du + dv * dv
    return energy
