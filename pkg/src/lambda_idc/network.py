"""epsilon-recurrence networks: adjacency, link density, clustering and transitivity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .recurrence import BISECTION_STEPS, RecurrenceGraph, _points


class UnreachableTargetError(ValueError):
    pass


@dataclass
class NetworkSummary:
    link_density: float
    global_clustering: float
    transitivity: float
    degree_histogram: dict
    local_clustering: np.ndarray
    epsilon_used: float | None = None
    epsilon_rule: str | None = None


def adjacency_from_recurrence(graph: RecurrenceGraph | np.ndarray) -> sparse.csr_matrix:
    """A = R - I as a CSR matrix of int8 with no stored diagonal."""
    R = graph.matrix if isinstance(graph, RecurrenceGraph) else sparse.csr_matrix(np.asarray(graph))
    A = sparse.csr_matrix(R, dtype=np.int8, copy=True)
    A.setdiag(0)
    A.eliminate_zeros()
    A.sort_indices()
    return A


def triangles_per_node(A: sparse.csr_matrix, chunk: int = 2048) -> np.ndarray:
    """Number of triangles through each node, from row blocks of (A @ A) masked by A."""
    A = sparse.csr_matrix(A, dtype=np.int64)
    n = A.shape[0]
    out = np.zeros(n, dtype=np.int64)
    for lo in range(0, n, chunk):
        rows = A[lo : lo + chunk]
        paths = rows @ A
        out[lo : lo + chunk] = np.asarray(paths.multiply(rows).sum(axis=1)).ravel()
    return out // 2


def network_measures(A, epsilon: float | None = None, rule: str | None = None) -> NetworkSummary:
    """Link density, mean local clustering (C_i = 0 when k_i < 2) and transitivity."""
    A = sparse.csr_matrix(A)
    n = A.shape[0]
    if n < 3:
        raise ValueError("network measures need at least three nodes")
    k = np.diff(A.indptr).astype(np.int64)
    tri = triangles_per_node(A)
    pairs = k * (k - 1)
    local = np.zeros(n)
    np.divide(2.0 * tri, pairs, out=local, where=pairs > 0)
    denom = pairs.sum()
    T = float(2.0 * tri.sum() / denom) if denom else 0.0
    degrees, counts = np.unique(k, return_counts=True)
    return NetworkSummary(
        link_density=float(k.sum() / (n * (n - 1))),
        global_clustering=float(local.mean()),
        transitivity=T,
        degree_histogram={int(d): int(c) for d, c in zip(degrees, counts)},
        local_clustering=local,
        epsilon_used=epsilon,
        epsilon_rule=rule,
    )


def link_density_at(tree: cKDTree, epsilon: float) -> float:
    n = tree.n
    return (float(tree.count_neighbors(tree, epsilon)) - n) / (n * (n - 1))


def epsilon_by_link_density(cloud, target_ld: float = 0.02, rel_tol: float = 0.05, steps: int = BISECTION_STEPS) -> float:
    """Bisect epsilon until the link density is within `rel_tol` of `target_ld`."""
    if not 0.0 < target_ld <= 0.05:
        raise ValueError("target link density must lie in (0, 0.05]")
    pts = _points(cloud)
    if pts.shape[0] < 3:
        raise ValueError("need at least three points")
    tree = cKDTree(pts)
    hi = float(np.linalg.norm(pts.max(0) - pts.min(0)))
    if hi == 0.0:
        # coincident points: every positive radius links everything
        return np.finfo(float).tiny
    if link_density_at(tree, hi) < target_ld:
        raise UnreachableTargetError("link density at the cloud diameter is below the target")
    lo = 0.0
    best, best_err = hi, np.inf
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        ld = link_density_at(tree, mid)
        err = abs(ld - target_ld) / target_ld
        if err < best_err:
            best, best_err = mid, err
        if err < rel_tol:
            return mid
        if ld > target_ld:
            hi = mid
        else:
            lo = mid
    return best
