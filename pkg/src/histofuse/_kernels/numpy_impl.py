"""Pure numpy/stdlib implementations of the hot kernels.

Reference semantics for the numba backend: per output element both
backends accumulate in the same order, so results agree to the last bit
on typical hardware.
"""

from __future__ import annotations

import heapq

import numpy as np

SQRT2 = np.sqrt(2.0)


def dijkstra_csr(indptr: np.ndarray, indices: np.ndarray, weights: np.ndarray,
                 source: int) -> np.ndarray:
    """Single-source shortest paths on a CSR graph with nonnegative weights.

    Returns the distance vector; unreachable nodes stay at +inf.
    """
    n = indptr.shape[0] - 1
    dist = np.full(n, np.inf)
    done = np.zeros(n, dtype=bool)
    dist[source] = 0.0
    heap = [(0.0, int(source))]
    while heap:
        k, v = heapq.heappop(heap)
        if done[v]:
            continue
        done[v] = True
        for e in range(indptr[v], indptr[v + 1]):
            u = int(indices[e])
            nd = k + weights[e]
            if nd < dist[u]:
                dist[u] = nd
                heapq.heappush(heap, (float(nd), u))
    return dist


def central_gradient(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradients (gy, gx) with replicated edges."""
    img = np.asarray(img, dtype=np.float64)
    padded = np.pad(img, 1, mode="edge")
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) * 0.5
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) * 0.5
    return gy, gx


def sep_convolve2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2-D convolution with an odd symmetric kernel, edges replicated."""
    img = np.asarray(img, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    r = kernel.shape[0] // 2
    h, w = img.shape
    padded = np.pad(img, ((0, 0), (r, r)), mode="edge")
    out = np.zeros((h, w), dtype=np.float64)
    for t in range(kernel.shape[0]):
        out += kernel[t] * padded[:, t:t + w]
    padded = np.pad(out, ((r, r), (0, 0)), mode="edge")
    out2 = np.zeros((h, w), dtype=np.float64)
    for t in range(kernel.shape[0]):
        out2 += kernel[t] * padded[t:t + h, :]
    return out2


def local_maxima(resp: np.ndarray, threshold: float,
                 margin: int) -> tuple[np.ndarray, np.ndarray]:
    """Strict 8-neighbor local maxima above threshold, outside the margin.

    Returns (rows, cols) in row-major (row, col) order.
    """
    resp = np.asarray(resp, dtype=np.float64)
    h, w = resp.shape
    lo = max(margin, 1)
    rhi = h - max(margin, 1)
    chi = w - max(margin, 1)
    if rhi <= lo or chi <= lo:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    c = resp[lo:rhi, lo:chi]
    mask = c > threshold
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            mask &= c > resp[lo + dr:rhi + dr, lo + dc:chi + dc]
    rows, cols = np.nonzero(mask)
    return (rows + lo).astype(np.int64), (cols + lo).astype(np.int64)


def haar_level_rows(x: np.ndarray) -> np.ndarray:
    """One orthonormal Haar analysis step along axis 1.

    Output layout per row: ceil(n/2) approximation coefficients (an odd
    trailing sample passes through unchanged), then floor(n/2) details.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[1]
    h = n // 2
    out = np.empty_like(x)
    even = x[:, 0:2 * h:2]
    odd = x[:, 1:2 * h:2]
    out[:, :h] = (even + odd) / SQRT2
    if n % 2 == 1:
        out[:, h] = x[:, n - 1]
    out[:, n - h:] = (even - odd) / SQRT2
    return out


def haar_level_rows_inv(y: np.ndarray) -> np.ndarray:
    """Inverse of haar_level_rows."""
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[1]
    h = n // 2
    a = y[:, :h]
    d = y[:, n - h:]
    x = np.empty_like(y)
    x[:, 0:2 * h:2] = (a + d) / SQRT2
    x[:, 1:2 * h:2] = (a - d) / SQRT2
    if n % 2 == 1:
        x[:, n - 1] = y[:, h]
    return x


def haar_level_fwd(x: np.ndarray) -> np.ndarray:
    """One 2-D orthonormal Haar level: rows then columns, packed layout.

    With hr=ceil(rows/2), hc=ceil(cols/2) the packed output holds
    LL=[:hr,:hc], LH=[:hr,hc:], HL=[hr:,:hc], HH=[hr:,hc:].
    """
    return haar_level_rows(haar_level_rows(x).T).T


def haar_level_inv(y: np.ndarray) -> np.ndarray:
    """Inverse of haar_level_fwd."""
    return haar_level_rows_inv(haar_level_rows_inv(y.T).T)
