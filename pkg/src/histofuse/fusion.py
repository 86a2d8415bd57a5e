"""Discriminant correlation analysis fusion of the two feature streams.

Per stream: whiten the between-class scatter (rank <= c-1 via the c x c
Gram trick), then SVD the cross-covariance of the whitened streams and
scale both sides by sigma^(-1/2) so the transformed training streams have
identity cross-correlation. Fused output is the concatenation of the two
r-dimensional projections (length 2r).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from .errors import ConfigError, NumericError

DCA_MAGIC = "DCA1"

_RANK_FLOOR = 1e-10


@dataclass
class DcaModel:
    wx: np.ndarray  # r x p
    wy: np.ndarray  # r x q
    mean_x: np.ndarray
    mean_y: np.ndarray
    r: int
    classes: tuple[str, ...] = ()
    # Fit-time diagnostics (not serialized): whitening transforms with
    # px.T @ Sbx @ px = I, and the cross-covariance spectrum.
    px: np.ndarray | None = field(default=None, repr=False)
    py: np.ndarray | None = field(default=None, repr=False)
    sigma: np.ndarray | None = field(default=None, repr=False)

    @property
    def p(self) -> int:
        return self.wx.shape[1]

    @property
    def q(self) -> int:
        return self.wy.shape[1]


@dataclass
class FusedVector:
    values: np.ndarray  # length 2r
    label: str


def _fix_signs_cols(vecs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First non-negligible entry of each column made positive; returns the
    sign-fixed matrix and the per-column flip signs applied."""
    out = vecs.copy()
    flips = np.ones(out.shape[1])
    for c in range(out.shape[1]):
        col = out[:, c]
        scale = max(np.abs(col).max(), 1e-300)
        nz = np.nonzero(np.abs(col) > 1e-12 * scale)[0]
        if nz.size and col[nz[0]] < 0:
            out[:, c] = -col
            flips[c] = -1.0
    return out, flips


def between_class_scatter_factors(
        centered: np.ndarray, labels: np.ndarray,
        classes: np.ndarray) -> np.ndarray:
    """Columns sqrt(n_i) * (class mean) of a globally centered stream; the
    between-class scatter is factors @ factors.T."""
    cols = []
    for cls in classes:
        mask = labels == cls
        cols.append(np.sqrt(mask.sum()) * centered[:, mask].mean(axis=1))
    return np.stack(cols, axis=1)


def _whiten_between_class(centered: np.ndarray, labels: np.ndarray,
                          classes: np.ndarray, r: int,
                          stream: str) -> np.ndarray:
    phi = between_class_scatter_factors(centered, labels, classes)
    gram = phi.T @ phi
    eigvals, eigvecs = np.linalg.eigh(gram)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs, _ = _fix_signs_cols(eigvecs[:, order])
    # Floor relative to the total scatter, so equal class means (Sb = 0 up
    # to round-off) are detected as rank 0 rather than noise eigenvalues.
    scatter_scale = float((centered ** 2).sum())
    floor = _RANK_FLOOR * max(eigvals[0], scatter_scale, 0.0)
    rank = int((eigvals > max(floor, 0.0)).sum())
    if rank == 0:
        raise NumericError(
            f"no discriminative directions in stream {stream} "
            "(between-class scatter is zero)"
        )
    if rank < r:
        warnings.warn(
            f"between-class scatter of stream {stream} has rank {rank} < r={r}; "
            "r reduced"
        )
        r = rank
    lam = eigvals[:r]
    u = phi @ eigvecs[:, :r] / np.sqrt(lam)
    return u / np.sqrt(lam)  # p x r with P.T @ Sb @ P = I


def fit_dca(x: np.ndarray, y: np.ndarray, labels, r: int | None = None,
            ) -> DcaModel:
    """Fit paired transforms on column-sample matrices X (p x n), Y (q x n)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    labels = np.asarray(labels)
    n = labels.shape[0]
    if x.shape[1] != n or y.shape[1] != n:
        raise ConfigError("X, Y and labels must agree on the sample count")
    classes = np.unique(labels)
    c = classes.size
    if c < 2:
        raise ConfigError("need at least 2 classes")
    for cls in classes:
        if (labels == cls).sum() < 2:
            raise ConfigError(f"class {cls!r} has fewer than 2 samples")
    if r is None:
        r = c - 1
    if not 1 <= r <= c - 1:
        raise ConfigError(f"r must be in [1, c-1]={c - 1}, got {r}")

    mean_x = x.mean(axis=1)
    mean_y = y.mean(axis=1)
    xc = x - mean_x[:, None]
    yc = y - mean_y[:, None]

    px = _whiten_between_class(xc, labels, classes, r, "X")
    py = _whiten_between_class(yc, labels, classes, r, "Y")
    r_common = min(px.shape[1], py.shape[1])
    px, py = px[:, :r_common], py[:, :r_common]

    xp = px.T @ xc
    yp = py.T @ yc
    cross = xp @ yp.T
    u, sigma, vt = np.linalg.svd(cross)
    u, flips = _fix_signs_cols(u)
    vt = flips[:, None] * vt  # keep u @ diag(sigma) @ vt invariant

    floor = _RANK_FLOOR * max(sigma[0], 0.0)
    r_final = int((sigma > max(floor, 0.0)).sum())
    if r_final == 0:
        raise NumericError("cross-covariance of whitened streams is zero")
    if r_final < r_common:
        warnings.warn(
            f"cross-covariance has {r_final} nonzero singular value(s); "
            f"fused rank reduced from {r_common}"
        )
    u = u[:, :r_final]
    sigma = sigma[:r_final]
    vt = vt[:r_final]

    scale = 1.0 / np.sqrt(sigma)
    wx = (u * scale[None, :]).T @ px.T
    wy = (vt.T * scale[None, :]).T @ py.T
    return DcaModel(
        wx=wx, wy=wy, mean_x=mean_x, mean_y=mean_y, r=r_final,
        classes=tuple(str(cls) for cls in classes),
        px=px, py=py, sigma=sigma,
    )


def dca_transform(model: DcaModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Fused vector (Wx (x - mux)) || (Wy (y - muy)), length 2r."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != (model.p,) or y.shape != (model.q,):
        raise ConfigError(
            f"expected vectors of dims ({model.p},), ({model.q},); "
            f"got {x.shape}, {y.shape}"
        )
    return np.concatenate([
        model.wx @ (x - model.mean_x),
        model.wy @ (y - model.mean_y),
    ])


def dca_transform_batch(model: DcaModel, x: np.ndarray,
                        y: np.ndarray) -> np.ndarray:
    """Column-sample batch version; returns 2r x n."""
    if x.shape[0] != model.p or y.shape[0] != model.q:
        raise ConfigError("stream dimensions do not match the model")
    return np.vstack([
        model.wx @ (x - model.mean_x[:, None]),
        model.wy @ (y - model.mean_y[:, None]),
    ])


def write_dca_model(path: str | Path, model: DcaModel, n_classes: int) -> None:
    with open(path, "wb") as f:
        binio.write_magic(f, DCA_MAGIC)
        binio.write_u32(f, model.p)
        binio.write_u32(f, model.q)
        binio.write_u32(f, model.r)
        binio.write_u32(f, n_classes)
        binio.write_f64_array(f, model.wx)
        binio.write_f64_array(f, model.wy)
        binio.write_f64_array(f, model.mean_x)
        binio.write_f64_array(f, model.mean_y)


def read_dca_model(path: str | Path) -> DcaModel:
    with open(path, "rb") as f:
        binio.read_magic(f, DCA_MAGIC)
        p = binio.read_u32(f)
        q = binio.read_u32(f)
        r = binio.read_u32(f)
        binio.read_u32(f)  # class count, informational
        wx = binio.read_f64_array(f)
        wy = binio.read_f64_array(f)
        mean_x = binio.read_f64_array(f)
        mean_y = binio.read_f64_array(f)
    if wx.shape != (r, p) or wy.shape != (r, q):
        raise ConfigError("DCA model dims are inconsistent")
    return DcaModel(wx=wx, wy=wy, mean_x=mean_x, mean_y=mean_y, r=r)
