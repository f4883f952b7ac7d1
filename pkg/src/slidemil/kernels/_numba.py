"""Numba-jitted implementations of the hot kernels.

Same contracts as kernels._numpy; see that module for docs. Loop nests
accumulate in the same order as the numpy path so forward and grad-input
results are bitwise identical between backends.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def depthwise_conv2d(x, kernel):
    H, W, C = x.shape
    k = kernel.shape[0]
    p = k // 2
    out = np.zeros((H, W, C), dtype=x.dtype)
    for i in prange(H):
        for j in range(W):
            for c in range(C):
                acc = 0.0
                for u in range(k):
                    ii = i + u - p
                    if ii < 0 or ii >= H:
                        continue
                    for v in range(k):
                        jj = j + v - p
                        if jj < 0 or jj >= W:
                            continue
                        acc += x[ii, jj, c] * kernel[u, v, c]
                out[i, j, c] = acc
    return out


@njit(cache=True, parallel=True)
def _depthwise_conv2d_flipped(g, kernel):
    # cross-correlation of g with the flipped kernel, fused flip
    H, W, C = g.shape
    k = kernel.shape[0]
    p = k // 2
    out = np.zeros((H, W, C), dtype=g.dtype)
    for i in prange(H):
        for j in range(W):
            for c in range(C):
                acc = 0.0
                for u in range(k):
                    ii = i + u - p
                    if ii < 0 or ii >= H:
                        continue
                    for v in range(k):
                        jj = j + v - p
                        if jj < 0 or jj >= W:
                            continue
                        acc += g[ii, jj, c] * kernel[k - 1 - u, k - 1 - v, c]
                out[i, j, c] = acc
    return out


def depthwise_conv2d_grad_input(grad_out, kernel):
    return _depthwise_conv2d_flipped(grad_out, kernel)


@njit(cache=True)
def depthwise_conv2d_grad_kernel(grad_out, x, k):
    # channel-innermost so every access is contiguous; per (u, v, c) the
    # adds still arrive in ascending (i, j) order
    H, W, C = x.shape
    p = k // 2
    dk = np.zeros((k, k, C), dtype=x.dtype)
    for i in range(H):
        for u in range(k):
            ii = i + u - p
            if ii < 0 or ii >= H:
                continue
            for j in range(W):
                for v in range(k):
                    jj = j + v - p
                    if jj < 0 or jj >= W:
                        continue
                    for c in range(C):
                        dk[u, v, c] += grad_out[i, j, c] * x[ii, jj, c]
    return dk


@njit(cache=True)
def points_in_polygon(points, polygon):
    n = polygon.shape[0]
    npts = points.shape[0]
    inside = np.zeros(npts, dtype=np.bool_)
    for t in range(npts):
        px = points[t, 0]
        py = points[t, 1]
        flag = False
        j = n - 1
        for i in range(n):
            xi = polygon[i, 0]
            yi = polygon[i, 1]
            xj = polygon[j, 0]
            yj = polygon[j, 1]
            if (yi > py) != (yj > py):
                xhit = (xj - xi) * (py - yi) / (yj - yi) + xi
                if px < xhit:
                    flag = not flag
            j = i
        inside[t] = flag
    return inside
