"""Numba-compiled versions of the hot kernels.

Each function mirrors numpy_impl element-for-element (same accumulation
order, no fastmath) so the two backends agree numerically.
"""

from __future__ import annotations

import numpy as np
from numba import njit

SQRT2 = np.sqrt(2.0)


@njit(cache=True)
def dijkstra_csr(indptr, indices, weights, source):
    n = indptr.shape[0] - 1
    dist = np.full(n, np.inf)
    done = np.zeros(n, dtype=np.bool_)
    cap = indices.shape[0] + 2
    heap_key = np.empty(cap, dtype=np.float64)
    heap_node = np.empty(cap, dtype=np.int64)
    dist[source] = 0.0
    heap_key[0] = 0.0
    heap_node[0] = source
    size = 1
    while size > 0:
        k = heap_key[0]
        v = heap_node[0]
        size -= 1
        heap_key[0] = heap_key[size]
        heap_node[0] = heap_node[size]
        i = 0
        while True:
            left = 2 * i + 1
            right = left + 1
            smallest = i
            if left < size and heap_key[left] < heap_key[smallest]:
                smallest = left
            if right < size and heap_key[right] < heap_key[smallest]:
                smallest = right
            if smallest == i:
                break
            heap_key[i], heap_key[smallest] = heap_key[smallest], heap_key[i]
            heap_node[i], heap_node[smallest] = heap_node[smallest], heap_node[i]
            i = smallest
        if done[v]:
            continue
        done[v] = True
        for e in range(indptr[v], indptr[v + 1]):
            u = indices[e]
            nd = k + weights[e]
            if nd < dist[u]:
                dist[u] = nd
                j = size
                heap_key[j] = nd
                heap_node[j] = u
                size += 1
                while j > 0:
                    parent = (j - 1) // 2
                    if heap_key[parent] > heap_key[j]:
                        heap_key[parent], heap_key[j] = heap_key[j], heap_key[parent]
                        heap_node[parent], heap_node[j] = heap_node[j], heap_node[parent]
                        j = parent
                    else:
                        break
    return dist


@njit(cache=True)
def central_gradient(img):
    h, w = img.shape
    gy = np.empty((h, w), dtype=np.float64)
    gx = np.empty((h, w), dtype=np.float64)
    for i in range(h):
        iu = i - 1 if i > 0 else 0
        idn = i + 1 if i < h - 1 else h - 1
        for j in range(w):
            jl = j - 1 if j > 0 else 0
            jr = j + 1 if j < w - 1 else w - 1
            gy[i, j] = (img[idn, j] - img[iu, j]) * 0.5
            gx[i, j] = (img[i, jr] - img[i, jl]) * 0.5
    return gy, gx


@njit(cache=True)
def sep_convolve2d(img, kernel):
    h, w = img.shape
    taps = kernel.shape[0]
    r = taps // 2
    tmp = np.zeros((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for t in range(taps):
                jj = j + t - r
                if jj < 0:
                    jj = 0
                elif jj > w - 1:
                    jj = w - 1
                acc += kernel[t] * img[i, jj]
            tmp[i, j] = acc
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for t in range(taps):
                ii = i + t - r
                if ii < 0:
                    ii = 0
                elif ii > h - 1:
                    ii = h - 1
                acc += kernel[t] * tmp[ii, j]
            out[i, j] = acc
    return out


@njit(cache=True)
def local_maxima(resp, threshold, margin):
    h, w = resp.shape
    lo = margin if margin > 1 else 1
    rhi = h - lo
    chi = w - lo
    count = 0
    rows = np.empty(h * w, dtype=np.int64)
    cols = np.empty(h * w, dtype=np.int64)
    for i in range(lo, rhi):
        for j in range(lo, chi):
            v = resp[i, j]
            if v <= threshold:
                continue
            is_max = True
            for di in range(-1, 2):
                for dj in range(-1, 2):
                    if di == 0 and dj == 0:
                        continue
                    if not v > resp[i + di, j + dj]:
                        is_max = False
                        break
                if not is_max:
                    break
            if is_max:
                rows[count] = i
                cols[count] = j
                count += 1
    return rows[:count].copy(), cols[:count].copy()


@njit(cache=True)
def _haar_rows(x):
    rows, n = x.shape
    h = n // 2
    out = np.empty((rows, n), dtype=np.float64)
    for i in range(rows):
        for j in range(h):
            e = x[i, 2 * j]
            o = x[i, 2 * j + 1]
            out[i, j] = (e + o) / SQRT2
            out[i, n - h + j] = (e - o) / SQRT2
        if n % 2 == 1:
            out[i, h] = x[i, n - 1]
    return out


@njit(cache=True)
def _haar_rows_inv(y):
    rows, n = y.shape
    h = n // 2
    x = np.empty((rows, n), dtype=np.float64)
    for i in range(rows):
        for j in range(h):
            a = y[i, j]
            d = y[i, n - h + j]
            x[i, 2 * j] = (a + d) / SQRT2
            x[i, 2 * j + 1] = (a - d) / SQRT2
        if n % 2 == 1:
            x[i, n - 1] = y[i, h]
    return x


@njit(cache=True)
def haar_level_fwd(x):
    return np.ascontiguousarray(_haar_rows(np.ascontiguousarray(_haar_rows(x).T)).T)


@njit(cache=True)
def haar_level_inv(y):
    return np.ascontiguousarray(_haar_rows_inv(np.ascontiguousarray(_haar_rows_inv(y.T)).T))
