"""Patch-center sampling, KNN graphs and the K-Rectify token operator.

K-Rectify replaces every token ``x_g`` by ``x_g + lam * sum_i w_gi x_{n(g,i)}``
where ``n(g, .)`` are the K nearest other centers and ``w_g.`` are normalized
inverse squared distances. The same map written as a ``G x G`` matrix is
``I + lam * (A * D)`` with ``A`` the KNN adjacency and ``D`` the weights.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DimensionError, NumericError

EPS_SQ_DIST = 1e-8


def normalize_unit_sphere(points: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale so the farthest point has norm 1."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) < 1:
        raise DimensionError(f"expected an N x 3 point array, got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise NumericError("non-finite point coordinates")
    c = points - points.mean(axis=0)
    r = np.sqrt((c * c).sum(axis=1)).max()
    return c / r if r > 0 else c


def pairwise_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(axis=-1)


def fps(points: np.ndarray, G: int, seed_idx: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index."""
    n = len(points)
    if not 1 <= G <= n:
        raise ConfigError(f"cannot sample {G} centers from {n} points")
    sel = np.empty(G, dtype=np.int64)
    sel[0] = seed_idx
    d = ((points - points[seed_idx]) ** 2).sum(axis=1)
    for k in range(1, G):
        sel[k] = int(np.argmax(d))
        d = np.minimum(d, ((points - points[sel[k]]) ** 2).sum(axis=1))
    return sel


def group_points(points: np.ndarray, centers: np.ndarray, size: int) -> np.ndarray:
    """Indices ``[G, size]`` of the nearest points to each center (center included)."""
    if size > len(points):
        raise ConfigError(f"group size {size} exceeds point count {len(points)}")
    d = pairwise_sq_dist(centers, points)
    return np.argsort(d, axis=1, kind="stable")[:, :size]


def idw_weights(sq_dist_row: np.ndarray, squared: bool = True) -> np.ndarray:
    """Normalized inverse-distance weights over the last axis.

    Distances are clamped to ``EPS_SQ_DIST`` first. With ``squared=False`` the
    weights use the unsquared distance instead.
    """
    d = np.maximum(np.asarray(sq_dist_row, dtype=np.float64), EPS_SQ_DIST)
    if not squared:
        d = np.sqrt(d)
    inv = 1.0 / d
    return inv / inv.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class KnnGraph:
    centers: np.ndarray      # [G, 3]
    k: int
    neighbor_idx: np.ndarray  # [G, K], self excluded
    sq_dist: np.ndarray      # [G, K], ascending per row
    idw: np.ndarray          # [G, K], rows sum to 1

    @property
    def n_tokens(self) -> int:
        return len(self.centers)

    def neighbor_matrix(self) -> sp.csr_matrix:
        """Sparse ``A * D`` (the lam-free off-diagonal part of K-Rectify)."""
        G, K = self.neighbor_idx.shape
        rows = np.repeat(np.arange(G), K)
        return sp.csr_matrix((self.idw.reshape(-1), (rows, self.neighbor_idx.reshape(-1))),
                             shape=(G, G))

    def permuted(self, perm: np.ndarray) -> "KnnGraph":
        """Relabel tokens so that new token ``t`` is old token ``perm[t]``."""
        inv = np.argsort(perm)
        return KnnGraph(self.centers[perm], self.k, inv[self.neighbor_idx[perm]],
                        self.sq_dist[perm], self.idw[perm])


def knn(centers: np.ndarray, K: int, squared: bool = True) -> KnnGraph:
    """K nearest other centers for every center; ties go to the lowest index."""
    centers = np.asarray(centers, dtype=np.float64)
    G = len(centers)
    if not 0 <= K < G:
        raise ConfigError(f"K={K} needs 0 <= K < G={G}")
    d = pairwise_sq_dist(centers, centers)
    np.fill_diagonal(d, np.inf)
    idx = np.argsort(d, axis=1, kind="stable")[:, :K]
    sq = np.take_along_axis(d, idx, axis=1)
    return KnnGraph(centers, K, idx, sq, idw_weights(sq, squared=squared))


def neighbor_operator(graphs: Sequence[KnnGraph]) -> sp.csr_matrix:
    """Block-diagonal neighbor operator for a batch of clouds."""
    return sp.block_diag([g.neighbor_matrix() for g in graphs], format="csr")


def k_rectify_apply(graph: KnnGraph, lam: float, X: np.ndarray) -> np.ndarray:
    """Gather the K neighbors, IDW-interpolate, add back with weight ``lam``."""
    X = np.asarray(X)
    if X.shape[0] != graph.n_tokens:
        raise DimensionError(f"{X.shape[0]} tokens but graph has {graph.n_tokens}")
    w = graph.idw.astype(X.dtype) if X.dtype == np.float32 else graph.idw
    x_new = np.einsum("gk,gkc->gc", w, X[graph.neighbor_idx])
    return X + lam * x_new


@dataclass(frozen=True)
class SparseTokenMix:
    """``G x G`` operator stored as (row, col, weight) triples."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray

    @property
    def nnz(self) -> int:
        return len(self.weights)

    def to_dense(self) -> np.ndarray:
        D = np.zeros((self.n, self.n))
        np.add.at(D, (self.rows, self.cols), self.weights)
        return D

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.weights, (self.rows, self.cols)), shape=(self.n, self.n))

    def apply(self, X: np.ndarray) -> np.ndarray:
        if X.shape[0] != self.n:
            raise DimensionError(f"{X.shape[0]} tokens but operator is {self.n} x {self.n}")
        return np.asarray(self.to_csr() @ X)


def build_k_matrix(graph: KnnGraph, lam: float) -> SparseTokenMix:
    G, K = graph.neighbor_idx.shape
    diag = np.arange(G)
    if lam == 0:
        return SparseTokenMix(G, diag, diag.copy(), np.ones(G))
    rows = np.concatenate([diag, np.repeat(diag, K)])
    cols = np.concatenate([diag, graph.neighbor_idx.reshape(-1)])
    w = np.concatenate([np.ones(G), lam * graph.idw.reshape(-1)])
    return SparseTokenMix(G, rows, cols, w)


def local_feature_distance(graph: KnnGraph, X: np.ndarray) -> float:
    """Mean L2 distance between each token and each of its KNN neighbors."""
    X = np.asarray(X)
    if X.shape[0] != graph.n_tokens:
        raise DimensionError(f"{X.shape[0]} tokens but graph has {graph.n_tokens}")
    diff = X[:, None, :] - X[graph.neighbor_idx]
    return float(np.sqrt((diff * diff).sum(axis=-1)).mean())
