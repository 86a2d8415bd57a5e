"""Per-class landmark-Isomap models and out-of-sample projection.

Fit: k-NN graph over all class samples, Dijkstra geodesics from the
landmarks, classical MDS on the double-centered squared landmark block.
Inference approximates a sample's squared geodesics to the landmarks
through its nearest landmarks (exact when the sample is a landmark) and
triangulates with the stored pseudo-projection.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import binio
from ._kernels import dijkstra_csr
from .dataset import SUBCLASSES
from .errors import ConfigError, NumericError

CSML_MAGIC = "CSM1"

_DENSE_KNN_LIMIT = 4096
_EIGVAL_FLOOR = 1e-10


@dataclass
class NeighborGraph:
    n: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    def edge_set(self) -> set[tuple[int, int, float]]:
        """Undirected edges as (i, j, w) with i < j (test/debug helper)."""
        edges = set()
        for i in range(self.n):
            for e in range(self.indptr[i], self.indptr[i + 1]):
                j = int(self.indices[e])
                if i < j:
                    edges.add((i, j, float(self.weights[e])))
        return edges


@dataclass
class GeodesicMatrix:
    dist: np.ndarray  # m x n
    landmark_ids: np.ndarray


@dataclass
class CsmlModel:
    subclass: str
    landmark_ids: np.ndarray
    train_points: np.ndarray  # m x input_dim landmark vectors
    embedding: np.ndarray  # d_eff x m — rows are sqrt(eigval)*eigvec
    projection: np.ndarray  # d_eff x m — rows are eigvec/sqrt(eigval)
    mean_sqdist: np.ndarray  # column means of squared landmark geodesics
    eigvals: np.ndarray  # d_eff positive, descending
    dim: int  # configured embedding width (block size after padding)
    landmark_geodesics: np.ndarray  # m x m

    @property
    def n_landmarks(self) -> int:
        return self.train_points.shape[0]


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (a ** 2).sum(axis=1)[:, None] + (b ** 2).sum(axis=1)[None, :]
    sq -= 2.0 * (a @ b.T)
    return np.maximum(sq, 0.0)


def _knn_lists(points: np.ndarray, k: int) -> list[np.ndarray]:
    """k nearest neighbor indices per point, ties broken by lower index."""
    n = points.shape[0]
    if n <= _DENSE_KNN_LIMIT:
        d = np.sqrt(_pairwise_sq_dists(points, points))
        out = []
        for i in range(n):
            row = d[i].copy()
            row[i] = np.inf
            order = np.lexsort((np.arange(n), row))
            out.append(order[:k])
        return out
    out = []
    chunk = 512
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d = np.sqrt(_pairwise_sq_dists(points[start:stop], points))
        for local, i in enumerate(range(start, stop)):
            row = d[local]
            row[i] = np.inf
            cand = np.argpartition(row, k)[:k + 1]
            order = np.lexsort((cand, row[cand]))
            out.append(cand[order][:k])
    return out


def _components(n: int, edges: dict[tuple[int, int], float]) -> np.ndarray:
    parent = np.arange(n)

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for (i, j) in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    return np.array([find(i) for i in range(n)])


def knn_graph(points: np.ndarray, k: int) -> NeighborGraph:
    """Symmetrized k-NN graph with Euclidean weights, repaired to a single
    connected component by adding shortest inter-component bridges."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n <= k or k < 1:
        raise ConfigError(f"need n > k >= 1, got n={n}, k={k}")

    neighbor_lists = _knn_lists(points, k)
    edges: dict[tuple[int, int], float] = {}
    for i, nbrs in enumerate(neighbor_lists):
        for j in nbrs:
            a, b = (i, int(j)) if i < j else (int(j), i)
            if (a, b) not in edges:
                edges[(a, b)] = float(np.sqrt(((points[a] - points[b]) ** 2).sum()))

    # Connectivity repair: repeatedly add the globally shortest edge
    # between two different components.
    while True:
        comp = _components(n, edges)
        labels = np.unique(comp)
        if labels.size == 1:
            break
        best = (np.inf, -1, -1)
        for start in range(0, n, 1024):
            stop = min(start + 1024, n)
            d = np.sqrt(_pairwise_sq_dists(points[start:stop], points))
            diff = comp[start:stop, None] != comp[None, :]
            d[~diff] = np.inf
            flat = np.argmin(d)
            r, c = np.unravel_index(flat, d.shape)
            if d[r, c] < best[0]:
                best = (float(d[r, c]), start + int(r), int(c))
        _, i, j = best
        a, b = (i, j) if i < j else (j, i)
        edges[(a, b)] = best[0]

    adj: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for (i, j), w in edges.items():
        adj[i].append((j, w))
        adj[j].append((i, w))
    indptr = np.zeros(n + 1, dtype=np.int64)
    indices = np.empty(2 * len(edges), dtype=np.int64)
    weights = np.empty(2 * len(edges), dtype=np.float64)
    pos = 0
    for i in range(n):
        adj[i].sort()
        for j, w in adj[i]:
            indices[pos] = j
            weights[pos] = w
            pos += 1
        indptr[i + 1] = pos
    return NeighborGraph(n=n, indptr=indptr, indices=indices, weights=weights)


def geodesic_to_landmarks(graph: NeighborGraph,
                          landmark_ids: Sequence[int]) -> GeodesicMatrix:
    """Dijkstra shortest paths from each landmark to every node."""
    ids = np.asarray(landmark_ids, dtype=np.int64)
    if np.unique(ids).size != ids.size:
        raise ConfigError("landmark ids must be distinct")
    dist = np.empty((ids.size, graph.n), dtype=np.float64)
    for row, lid in enumerate(ids):
        d = dijkstra_csr(graph.indptr, graph.indices, graph.weights, int(lid))
        if not np.all(np.isfinite(d)):
            raise NumericError(
                "unreachable node in geodesic computation (graph not connected)"
            )
        dist[row] = d
    return GeodesicMatrix(dist=dist, landmark_ids=ids)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Make the first non-negligible entry of each column positive."""
    out = vecs.copy()
    for c in range(out.shape[1]):
        col = out[:, c]
        nz = np.nonzero(np.abs(col) > 1e-12 * max(np.abs(col).max(), 1e-300))[0]
        if nz.size and col[nz[0]] < 0:
            out[:, c] = -col
    return out


def landmark_mds(d_mm: np.ndarray, dim: int,
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Classical MDS on the squared, double-centered landmark matrix.

    Returns (embedding d_eff x m, eigvals, mean_sqdist). Eigenvalues below
    1e-10 of the largest are dropped, reducing d_eff with a warning.
    """
    d_mm = np.asarray(d_mm, dtype=np.float64)
    m = d_mm.shape[0]
    if d_mm.shape != (m, m):
        raise ConfigError("landmark distance matrix must be square")
    if not np.allclose(d_mm, d_mm.T, atol=1e-8):
        raise ConfigError("landmark distance matrix must be symmetric")
    if np.abs(np.diag(d_mm)).max() > 1e-8:
        raise ConfigError("landmark distance matrix must have zero diagonal")
    if dim > m - 1:
        raise ConfigError(f"dim={dim} needs at least dim+1={dim + 1} landmarks")

    sq = d_mm ** 2
    mean_sqdist = sq.mean(axis=0)
    centering = np.eye(m) - np.full((m, m), 1.0 / m)
    b = -0.5 * centering @ sq @ centering
    b = (b + b.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(b)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = _fix_signs(eigvecs[:, order])

    floor = _EIGVAL_FLOOR * max(eigvals[0], 0.0)
    keep = eigvals > max(floor, 0.0)
    d_eff = min(dim, int(keep[:dim].sum()))
    if d_eff < dim:
        warnings.warn(
            f"only {d_eff} positive eigenvalue(s) above floor; dim reduced "
            f"from {dim}"
        )
    lam = eigvals[:d_eff]
    emb = np.sqrt(lam)[:, None] * eigvecs[:, :d_eff].T
    return emb, lam, mean_sqdist


def embed_point(model: CsmlModel, sqdist_to_landmarks: np.ndarray) -> np.ndarray:
    """Landmark triangulation y = -1/2 * projection @ (delta - mean)."""
    delta = np.asarray(sqdist_to_landmarks, dtype=np.float64)
    if delta.shape != (model.n_landmarks,):
        raise ConfigError(
            f"expected {model.n_landmarks} squared distances, got {delta.shape}"
        )
    return -0.5 * (model.projection @ (delta - model.mean_sqdist))


def fit_csml(class_vectors: np.ndarray, m: int, k: int, dim: int, seed: int,
             *, subclass: str = "", return_embedding: bool = False):
    """Fit one class manifold; landmarks drawn without replacement by seed.

    With return_embedding=True also returns the exact training embedding
    (d_eff x n) triangulated from true graph geodesics.
    """
    vectors = np.asarray(class_vectors, dtype=np.float64)
    n = vectors.shape[0]
    if n < 2:
        raise ConfigError("need at least 2 class samples")
    if n < m:
        warnings.warn(f"class has {n} samples < m={m}; using m={n}")
        m = n
    if dim > m - 1:
        warnings.warn(f"dim={dim} too large for m={m}; using dim={m - 1}")
        dim = m - 1
    if k >= n:
        warnings.warn(f"k={k} too large for {n} samples; using k={n - 1}")
        k = n - 1

    rng = np.random.default_rng(seed)
    landmark_ids = np.sort(rng.choice(n, size=m, replace=False))
    graph = knn_graph(vectors, k)
    geo = geodesic_to_landmarks(graph, landmark_ids)
    d_mm = geo.dist[:, landmark_ids]
    d_mm = (d_mm + d_mm.T) / 2.0
    emb, eigvals, mean_sqdist = landmark_mds(d_mm, dim)
    projection = emb / eigvals[:, None] if eigvals.size else emb.copy()
    model = CsmlModel(
        subclass=subclass,
        landmark_ids=landmark_ids,
        train_points=vectors[landmark_ids].copy(),
        embedding=emb,
        projection=projection,
        mean_sqdist=mean_sqdist,
        eigvals=eigvals,
        dim=dim,
        landmark_geodesics=d_mm,
    )
    if not return_embedding:
        return model
    sq_all = geo.dist ** 2
    train_emb = -0.5 * (projection @ (sq_all - mean_sqdist[:, None]))
    return model, train_emb


def _approx_sqdist(model: CsmlModel, sample: np.ndarray,
                   k_infer: int) -> np.ndarray:
    """Graph-free squared geodesics: route through the nearest landmarks."""
    diffs = model.train_points - sample[None, :]
    euclid = np.sqrt((diffs ** 2).sum(axis=1))
    m = euclid.size
    kk = min(k_infer, m)
    order = np.lexsort((np.arange(m), euclid))[:kk]
    routed = euclid[order][:, None] + model.landmark_geodesics[order, :]
    return routed.min(axis=0) ** 2


def class_block(model: CsmlModel, sample: np.ndarray,
                k_infer: int = 3) -> np.ndarray:
    """One class's holistic block, zero-padded to the configured dim."""
    y = embed_point(model, _approx_sqdist(model, sample, k_infer))
    if y.size < model.dim:
        y = np.concatenate([y, np.zeros(model.dim - y.size)])
    return y


def csml_transform(models: dict[str, CsmlModel], sample: np.ndarray,
                   k_infer: int = 3,
                   class_order: Sequence[str] | None = None) -> np.ndarray:
    """Concatenate per-class embeddings in fixed subclass order."""
    sample = np.asarray(sample, dtype=np.float64)
    if class_order is None:
        class_order = [s for s in SUBCLASSES if s in models]
        if set(class_order) != set(models):
            class_order = sorted(models)
    blocks = []
    for subclass in class_order:
        if subclass not in models:
            raise ConfigError(f"missing manifold model for subclass {subclass!r}")
        blocks.append(class_block(models[subclass], sample, k_infer))
    return np.concatenate(blocks)


def all_pairs_geodesics(graph: NeighborGraph) -> np.ndarray:
    """Dense geodesic matrix via repeated Dijkstra (diagnostics/acceptance)."""
    out = np.empty((graph.n, graph.n), dtype=np.float64)
    for i in range(graph.n):
        out[i] = dijkstra_csr(graph.indptr, graph.indices, graph.weights, i)
    return out


def residual_variance(geodesics: np.ndarray, embedding: np.ndarray) -> float:
    """1 - corr^2 between geodesic and embedded pairwise distances.

    embedding is d x n (columns are points); geodesics is n x n.
    """
    n = geodesics.shape[0]
    emb_d = np.sqrt(_pairwise_sq_dists(embedding.T, embedding.T))
    iu = np.triu_indices(n, k=1)
    corr = np.corrcoef(geodesics[iu], emb_d[iu])[0, 1]
    return float(1.0 - corr ** 2)


# --- CSM1 model file -------------------------------------------------------

def write_csml_models(path: str | Path, models: dict[str, CsmlModel]) -> None:
    with open(path, "wb") as f:
        binio.write_magic(f, CSML_MAGIC)
        binio.write_u32(f, len(models))
        for subclass in sorted(models):
            mdl = models[subclass]
            binio.write_str(f, subclass)
            binio.write_u32(f, mdl.n_landmarks)
            binio.write_u32(f, mdl.dim)
            binio.write_f64_array(f, mdl.landmark_ids.astype(np.float64))
            binio.write_f64_array(f, mdl.train_points)
            binio.write_f64_array(f, mdl.embedding)
            binio.write_f64_array(f, mdl.projection)
            binio.write_f64_array(f, mdl.mean_sqdist)
            binio.write_f64_array(f, mdl.eigvals)
            binio.write_f64_array(f, mdl.landmark_geodesics)


def read_csml_models(path: str | Path) -> dict[str, CsmlModel]:
    models = {}
    with open(path, "rb") as f:
        binio.read_magic(f, CSML_MAGIC)
        count = binio.read_u32(f)
        for _ in range(count):
            subclass = binio.read_str(f)
            _m = binio.read_u32(f)
            dim = binio.read_u32(f)
            landmark_ids = binio.read_f64_array(f).astype(np.int64)
            train_points = binio.read_f64_array(f)
            embedding = binio.read_f64_array(f)
            projection = binio.read_f64_array(f)
            mean_sqdist = binio.read_f64_array(f)
            eigvals = binio.read_f64_array(f)
            landmark_geodesics = binio.read_f64_array(f)
            models[subclass] = CsmlModel(
                subclass=subclass,
                landmark_ids=landmark_ids,
                train_points=train_points,
                embedding=embedding,
                projection=projection,
                mean_sqdist=mean_sqdist,
                eigvals=eigvals,
                dim=dim,
                landmark_geodesics=landmark_geodesics,
            )
    return models
