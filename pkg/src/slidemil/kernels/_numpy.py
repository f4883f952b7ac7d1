"""Pure-numpy reference implementations of the hot kernels.

These are the fallback path when numba is unavailable or disabled via
SLIDEMIL_NUMBA=0. Accumulation order matches the numba kernels (kernel
offsets visited in row-major order, products added sequentially) so the
two backends produce bitwise-identical forward/grad-input results.
"""

import numpy as np


def depthwise_conv2d(x, kernel):
    """Depthwise 2-D cross-correlation with zero 'same' padding, stride 1.

    Args:
        x: (H, W, C) float64 input grid.
        kernel: (k, k, C) float64 per-channel kernel, k odd.

    Returns:
        (H, W, C) output; out[i, j, c] = sum_{u,v} x[i+u-p, j+v-p, c] * kernel[u, v, c].
    """
    H, W, C = x.shape
    k = kernel.shape[0]
    p = k // 2
    out = np.zeros((H, W, C), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            du, dv = u - p, v - p
            xi0, xi1 = max(0, -du), min(H, H - du)
            xj0, xj1 = max(0, -dv), min(W, W - dv)
            if xi0 >= xi1 or xj0 >= xj1:
                continue
            out[xi0:xi1, xj0:xj1, :] += (
                x[xi0 + du:xi1 + du, xj0 + dv:xj1 + dv, :] * kernel[u, v, :]
            )
    return out


def depthwise_conv2d_grad_input(grad_out, kernel):
    """Gradient of depthwise_conv2d w.r.t. its input.

    Equals cross-correlation of grad_out with the spatially flipped kernel.
    """
    flipped = kernel[::-1, ::-1, :].copy()
    return depthwise_conv2d(grad_out, flipped)


def depthwise_conv2d_grad_kernel(grad_out, x, k):
    """Gradient of depthwise_conv2d w.r.t. the kernel.

    Args:
        grad_out: (H, W, C) upstream gradient.
        x: (H, W, C) forward input.
        k: kernel size (odd).

    Returns:
        (k, k, C) gradient.
    """
    H, W, C = x.shape
    p = k // 2
    dk = np.zeros((k, k, C), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            du, dv = u - p, v - p
            xi0, xi1 = max(0, -du), min(H, H - du)
            xj0, xj1 = max(0, -dv), min(W, W - dv)
            if xi0 >= xi1 or xj0 >= xj1:
                continue
            dk[u, v, :] = (
                grad_out[xi0:xi1, xj0:xj1, :]
                * x[xi0 + du:xi1 + du, xj0 + dv:xj1 + dv, :]
            ).sum(axis=(0, 1))
    return dk


def points_in_polygon(points, polygon):
    """Even-odd rule point-in-polygon test.

    Args:
        points: (N, 2) float64 array of (x, y) points.
        polygon: (M, 2) float64 array of vertices, implicitly closed.

    Returns:
        (N,) bool array; True where the point is inside.
    """
    px = points[:, 0]
    py = points[:, 1]
    n = polygon.shape[0]
    inside = np.zeros(px.shape[0], dtype=np.bool_)
    j = n - 1
    for i in range(n):
        xi, yi = polygon[i, 0], polygon[i, 1]
        xj, yj = polygon[j, 0], polygon[j, 1]
        crosses = (yi > py) != (yj > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xhit = (xj - xi) * (py - yi) / (yj - yi) + xi
        inside ^= crosses & (px < xhit)
        j = i
    return inside
