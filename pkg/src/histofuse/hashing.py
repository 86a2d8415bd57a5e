"""Per-patch local hash signatures: Haar-DWT, block-SVD and feature points.

A HashVector is the fixed-layout concatenation (dwt || svd || fp); the
layout triple is recorded once per corpus and in the HHV1 cache header.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from . import binio
from ._kernels import (
    central_gradient,
    haar_level_fwd,
    haar_level_inv,
    local_maxima,
    sep_convolve2d,
)
from .dataset import Patch, patch_anchors
from .errors import ConfigError

HASH_MAGIC = "HHV1"


@dataclass(frozen=True)
class HashConfig:
    levels: int = 3
    out_len: int = 49
    block: int = 16
    overlap: int = 8
    k: int = 4
    max_points: int = 16
    sigma: float = 1.5
    kappa: float = 0.04
    threshold: float = 1e-4
    margin: int = 3


@dataclass
class SubbandSet:
    """Multi-level Haar decomposition: per-level detail bands + final LL."""
    levels: int
    details: list[tuple[np.ndarray, np.ndarray, np.ndarray]]  # (lh, hl, hh)
    ll: np.ndarray
    shape: tuple[int, int]


@dataclass(frozen=True)
class FeaturePoint:
    row: int
    col: int
    response: float


@dataclass
class HashVector:
    dwt_segment: np.ndarray
    svd_segment: np.ndarray
    fp_segment: np.ndarray

    @property
    def layout(self) -> tuple[int, int, int]:
        return (len(self.dwt_segment), len(self.svd_segment), len(self.fp_segment))

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.dwt_segment, self.svd_segment, self.fp_segment])


def _as_pixels(patch: Patch | np.ndarray) -> np.ndarray:
    pixels = patch.pixels if isinstance(patch, Patch) else patch
    return np.asarray(pixels, dtype=np.float64)


def haar_dwt2(patch: Patch | np.ndarray, levels: int) -> SubbandSet:
    """Orthonormal separable Haar analysis, `levels` times on the LL band.

    Energy is conserved exactly up to round-off; odd dimensions carry the
    trailing sample into the approximation band unchanged.
    """
    x = _as_pixels(patch)
    h, w = x.shape
    if levels < 1:
        raise ConfigError("levels must be >= 1")
    if min(h, w) < 2 ** levels:
        raise ConfigError(f"{levels} levels need a patch of at least {2 ** levels} px")
    details = []
    ll = x
    for _ in range(levels):
        packed = haar_level_fwd(ll)
        hr = (ll.shape[0] + 1) // 2
        hc = (ll.shape[1] + 1) // 2
        details.append((
            packed[:hr, hc:].copy(),
            packed[hr:, :hc].copy(),
            packed[hr:, hc:].copy(),
        ))
        ll = packed[:hr, :hc].copy()
    return SubbandSet(levels=levels, details=details, ll=ll, shape=(h, w))


def haar_idwt2(subbands: SubbandSet) -> np.ndarray:
    """Perfect-reconstruction inverse of haar_dwt2."""
    ll = subbands.ll
    for lh, hl, hh in reversed(subbands.details):
        hr, hc = ll.shape
        packed = np.empty((hr + hl.shape[0], hc + lh.shape[1]), dtype=np.float64)
        packed[:hr, :hc] = ll
        packed[:hr, hc:] = lh
        packed[hr:, :hc] = hl
        packed[hr:, hc:] = hh
        ll = haar_level_inv(packed)
    return ll


def dwt_hash(patch: Patch | np.ndarray, levels: int, out_len: int) -> np.ndarray:
    """Sign bits of the first out_len final-LL coefficients against the band
    median (ties quantize to -1), followed by the 3 final-level detail
    energies. Length out_len + 3."""
    subbands = haar_dwt2(patch, levels)
    flat = subbands.ll.ravel()
    if flat.size < out_len:
        raise ConfigError(
            f"final LL band has {flat.size} coefficients < out_len {out_len}"
        )
    median = np.median(subbands.ll)
    bits = np.where(flat[:out_len] > median, 1.0, -1.0)
    lh, hl, hh = subbands.details[-1]
    energies = np.array([(lh ** 2).sum(), (hl ** 2).sum(), (hh ** 2).sum()])
    return np.concatenate([bits, energies])


def _block_anchors(patch_size: int, block: int, overlap: int) -> list[int]:
    if not 0 <= overlap < block:
        raise ConfigError(f"overlap must be in [0, block), got {overlap}")
    return patch_anchors(patch_size, block, block - overlap)


def svd_hash(patch: Patch | np.ndarray, block: int, overlap: int,
             k: int) -> np.ndarray:
    """Top-k singular values of each tiled sub-block, Frobenius-normalized,
    emitted in raster order of block anchors."""
    x = _as_pixels(patch)
    h, w = x.shape
    if k > block:
        raise ConfigError(f"k={k} exceeds block={block}")
    if block > min(h, w):
        raise ConfigError(f"block={block} exceeds patch {h}x{w}")
    rows = _block_anchors(h, block, overlap)
    cols = _block_anchors(w, block, overlap)
    blocks = np.empty((len(rows) * len(cols), block, block), dtype=np.float64)
    i = 0
    for r in rows:
        for c in cols:
            blocks[i] = x[r:r + block, c:c + block]
            i += 1
    sv = np.linalg.svd(blocks, compute_uv=False)  # descending per block
    fro = np.sqrt((blocks ** 2).sum(axis=(1, 2)))
    out = np.zeros((blocks.shape[0], k), dtype=np.float64)
    nonzero = fro > 0.0
    out[nonzero] = sv[nonzero, :k] / fro[nonzero, None]
    return out.ravel()


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return kern / kern.sum()


def harris_response(patch: Patch | np.ndarray, sigma: float,
                    kappa: float) -> np.ndarray:
    """R = det(M) - kappa*trace(M)^2 from the Gaussian-smoothed structure
    tensor of central-difference gradients."""
    x = _as_pixels(patch)
    gy, gx = central_gradient(x)
    kern = gaussian_kernel(sigma)
    sxx = sep_convolve2d(gx * gx, kern)
    syy = sep_convolve2d(gy * gy, kern)
    sxy = sep_convolve2d(gx * gy, kern)
    return sxx * syy - sxy * sxy - kappa * (sxx + syy) ** 2


def harris_points(patch: Patch | np.ndarray, sigma: float = 1.5,
                  kappa: float = 0.04, threshold: float = 1e-4,
                  margin: int = 3) -> list[FeaturePoint]:
    """Local maxima of the Harris response above threshold*max(R), outside
    the margin, sorted by (row, col). threshold is relative to the peak."""
    x = _as_pixels(patch)
    h, w = x.shape
    if min(h, w) - 2 * margin < 3:
        raise ConfigError(
            f"patch {h}x{w} too small for margin {margin} (needs 3x3 interior)"
        )
    resp = harris_response(x, sigma, kappa)
    rmax = resp.max()
    if rmax <= 0.0:
        return []
    rows, cols = local_maxima(resp, threshold * rmax, margin)
    return [FeaturePoint(int(r), int(c), float(resp[r, c]))
            for r, c in zip(rows, cols)]


def feature_point_hash(patch: Patch | np.ndarray, max_points: int, *,
                       sigma: float = 1.5, kappa: float = 0.04,
                       threshold: float = 1e-4, margin: int = 3) -> np.ndarray:
    """Normalized (row/P, col/P) pairs of the strongest detections in
    response-descending order, zero-padded to 2*max_points."""
    if max_points < 1:
        raise ConfigError("max_points must be >= 1")
    x = _as_pixels(patch)
    size = float(x.shape[0])
    pts = harris_points(x, sigma, kappa, threshold, margin)
    pts.sort(key=lambda p: (-p.response, p.row, p.col))
    out = np.zeros(2 * max_points, dtype=np.float64)
    for i, p in enumerate(pts[:max_points]):
        out[2 * i] = p.row / size
        out[2 * i + 1] = p.col / size
    return out


def hash_layout(config: HashConfig, patch_size: int) -> tuple[int, int, int]:
    """Segment lengths (dwt, svd, fp) for a corpus of patch_size patches."""
    anchors = _block_anchors(patch_size, config.block, config.overlap)
    return (
        config.out_len + 3,
        config.k * len(anchors) ** 2,
        2 * config.max_points,
    )


def local_signature(patch: Patch | np.ndarray, config: HashConfig) -> HashVector:
    """Concatenated (dwt || svd || fp) signature; deterministic per config."""
    x = _as_pixels(patch)
    hv = HashVector(
        dwt_segment=dwt_hash(x, config.levels, config.out_len),
        svd_segment=svd_hash(x, config.block, config.overlap, config.k),
        fp_segment=feature_point_hash(
            x, config.max_points, sigma=config.sigma, kappa=config.kappa,
            threshold=config.threshold, margin=config.margin,
        ),
    )
    expected = hash_layout(config, x.shape[0])
    if hv.layout != expected:
        raise ConfigError(
            f"hash layout {hv.layout} does not match declared {expected}"
        )
    if not np.all(np.isfinite(hv.values)):
        raise ConfigError("non-finite hash entries")
    return hv


# --- HHV1 hash cache -------------------------------------------------------

def write_hash_cache(path: str | Path, layout: tuple[int, int, int],
                     records: Iterable[tuple[str, tuple[int, int], np.ndarray]],
                     ) -> int:
    """Write (source_id, offset, vector) records; returns the record count."""
    total = sum(layout)
    count = 0
    with open(path, "wb") as f:
        binio.write_magic(f, HASH_MAGIC)
        for part in layout:
            binio.write_u32(f, part)
        for source_id, (row, col), vec in records:
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (total,):
                raise ConfigError(
                    f"hash record for {source_id} has length {vec.shape}, "
                    f"layout wants {total}"
                )
            binio.write_str(f, source_id)
            binio.write_u32(f, row)
            binio.write_u32(f, col)
            f.write(vec.astype("<f8").tobytes())
            count += 1
    return count


def _read_record(f: BinaryIO, head: bytes, total: int):
    import struct

    n = struct.unpack("<I", head)[0]
    raw = f.read(n)
    if len(raw) != n:
        raise ConfigError("truncated hash cache record")
    source_id = raw.decode("utf-8")
    row = binio.read_u32(f)
    col = binio.read_u32(f)
    data = f.read(8 * total)
    if len(data) != 8 * total:
        raise ConfigError("truncated hash cache record")
    vec = np.frombuffer(data, dtype="<f8").astype(np.float64)
    return source_id, (row, col), vec


def read_hash_cache(path: str | Path):
    """Read the full cache; returns (layout, records list)."""
    records = []
    with open(path, "rb") as f:
        binio.read_magic(f, HASH_MAGIC)
        layout = tuple(binio.read_u32(f) for _ in range(3))
        total = sum(layout)
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ConfigError("truncated hash cache record")
            records.append(_read_record(f, head, total))
    return layout, records
