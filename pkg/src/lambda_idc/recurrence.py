"""Recurrence matrices, the connectivity threshold, and scalar-series diagnostics
(return maps, first-return times, power spectra)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from .embedding import EmbeddedCloud, NoStructureError, _values

BISECTION_STEPS = 40
DENSE_LIMIT = 5000


class DegenerateCloudError(ValueError):
    pass


def _points(cloud) -> np.ndarray:
    pts = cloud.vectors if isinstance(cloud, EmbeddedCloud) else np.asarray(cloud, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    return pts


@dataclass
class RecurrenceGraph:
    """Symmetric recurrence relation, stored as a CSR matrix that includes the diagonal."""

    matrix: sparse.csr_matrix
    epsilon: float
    norm: str = "euclidean"

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def neighbors(self, i: int) -> np.ndarray:
        m = self.matrix
        return m.indices[m.indptr[i] : m.indptr[i + 1]]

    def density(self) -> float:
        """Fraction of recurrent off-diagonal entries."""
        n = self.size
        return (self.matrix.nnz - n) / (n * (n - 1)) if n > 1 else 0.0

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray().astype(np.int8)


def _pairs(pts: np.ndarray, epsilon: float) -> np.ndarray:
    if pts.shape[0] <= 1:
        return np.empty((0, 2), dtype=np.intp)
    return cKDTree(pts).query_pairs(epsilon, output_type="ndarray")


def _from_pairs(n: int, pairs: np.ndarray, diagonal: bool = True) -> sparse.csr_matrix:
    i = np.concatenate([pairs[:, 0], pairs[:, 1]] + ([np.arange(n)] if diagonal else []))
    j = np.concatenate([pairs[:, 1], pairs[:, 0]] + ([np.arange(n)] if diagonal else []))
    m = sparse.csr_matrix((np.ones(i.size, dtype=np.int8), (i, j)), shape=(n, n))
    m.sort_indices()
    return m


def recurrence_matrix(cloud, epsilon: float) -> RecurrenceGraph:
    """R_ij = 1 where ||x_i - x_j|| <= epsilon (Euclidean), found with a k-d tree."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    pts = _points(cloud)
    if pts.shape[0] == 0:
        raise ValueError("empty cloud")
    return RecurrenceGraph(_from_pairs(pts.shape[0], _pairs(pts, epsilon)), float(epsilon))


def dense_recurrence(cloud, epsilon: float) -> np.ndarray:
    """Brute-force O(N^2) recurrence matrix; small clouds only."""
    pts = _points(cloud)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    return (d <= epsilon).astype(np.int8)


def laplacian(R: np.ndarray) -> np.ndarray:
    """L = D - R + I with D = diag(k_i) and k_i = sum_j R_ij - 1."""
    R = np.asarray(R, dtype=float)
    k = R.sum(axis=1) - 1.0
    return np.diag(k) - R + np.eye(R.shape[0])


def _is_connected(pts: np.ndarray, epsilon: float) -> bool:
    n = pts.shape[0]
    pairs = _pairs(pts, epsilon)
    if pairs.shape[0] < n - 1:
        return False
    ncomp, _ = connected_components(_from_pairs(n, pairs, diagonal=False), directed=False)
    return ncomp == 1


def _upper_bound(pts: np.ndarray) -> float:
    """A radius at which the recurrence graph is certainly connected.

    Uses the widest edge of a spanning tree of the k-nearest-neighbour graph
    when that graph is connected, else the bounding-box diagonal.
    """
    n = pts.shape[0]
    diag = float(np.linalg.norm(pts.max(0) - pts.min(0)))
    if n <= 2 or diag == 0.0:
        return diag
    k = min(16, n - 1)
    dist, idx = cKDTree(pts).query(pts, k=k + 1)
    rows = np.repeat(np.arange(n), k)
    # zero-length edges would vanish from the sparse graph; nudge them
    w = np.maximum(dist[:, 1:].ravel(), np.finfo(float).tiny)
    g = sparse.csr_matrix((w, (rows, idx[:, 1:].ravel())), shape=(n, n))
    ncomp, _ = connected_components(g, directed=False)
    if ncomp > 1:
        return diag
    return float(minimum_spanning_tree(g).data.max())


def _bisect(pred, hi: float, steps: int) -> float:
    """Smallest epsilon in (0, hi] with pred(epsilon) true, assuming monotonicity."""
    lo = 0.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if pred(mid):
            hi = mid
        else:
            lo = mid
    return hi


def epsilon_critical(cloud, steps: int = BISECTION_STEPS) -> float:
    """Smallest epsilon at which the recurrence graph is connected.

    A single connected component is the same event as the second Laplacian
    eigenvalue leaving zero; see `epsilon_critical_spectral` for that route.
    """
    pts = _points(cloud)
    if pts.shape[0] < 2:
        raise ValueError("need at least two points")
    hi = _upper_bound(pts)
    if hi == 0.0:
        raise DegenerateCloudError("all points coincide; epsilon_c would be zero")
    return _bisect(lambda e: _is_connected(pts, e), hi, steps)


def zero_eigenvalue_count(R: np.ndarray, tol: float = 1e-9) -> int:
    ev = np.linalg.eigvalsh(laplacian(R))
    return int(np.sum(np.abs(ev) < tol * max(1.0, R.shape[0])))


def epsilon_critical_spectral(cloud, steps: int = BISECTION_STEPS) -> float:
    """Dense-eigenvalue version of `epsilon_critical`, for clouds of at most 500 points."""
    pts = _points(cloud)
    if pts.shape[0] > 500:
        raise ValueError("spectral route is limited to 500 points")
    hi = float(np.linalg.norm(pts.max(0) - pts.min(0)))
    if hi == 0.0:
        raise DegenerateCloudError("all points coincide; epsilon_c would be zero")
    return _bisect(lambda e: zero_eigenvalue_count(dense_recurrence(pts, e)) == 1, hi, steps)


def recurrence_plot_data(graph: RecurrenceGraph, downsample: int = 1) -> np.ndarray:
    """(i, j) pairs of recurrent entries on the grid of rows and columns divisible by `downsample`."""
    if downsample < 1:
        raise ValueError("downsample must be >= 1")
    m = graph.matrix
    if downsample > 1:
        keep = np.arange(0, graph.size, downsample)
        m = m[keep][:, keep].tocoo()
        return np.column_stack([keep[m.row], keep[m.col]])
    m = m.tocoo()
    order = np.lexsort((m.col, m.row))
    return np.column_stack([m.row[order], m.col[order]]).astype(np.intp)


def return_map(series, stride: int = 1) -> np.ndarray:
    """Pairs (s(i), s(i + stride))."""
    s = _values(series)
    if stride < 1 or s.size <= stride:
        raise ValueError("need 1 <= stride < len(series)")
    return np.column_stack([s[:-stride], s[stride:]])


def radial_dip(pairs: np.ndarray) -> tuple[float, float]:
    """Hartigan dip statistic and p-value of the distances of return-map points from their centroid.

    An annulus shows up as a bimodal radial distribution (small p-value).
    """
    import diptest

    r = np.linalg.norm(pairs - pairs.mean(axis=0), axis=1)
    dip, pval = diptest.diptest(r)
    return float(dip), float(pval)


@dataclass
class ReturnHistogram:
    edges: np.ndarray
    per_cell: list
    pooled: np.ndarray
    visits: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.edges.size - 1

    @property
    def generic_cell(self) -> int:
        """The most visited cell."""
        return int(np.argmax(self.visits))

    def cell(self, i: int | None = None) -> np.ndarray:
        return self.per_cell[self.generic_cell if i is None else i]


def cell_index(s: np.ndarray, edges: np.ndarray) -> np.ndarray:
    n_cells = edges.size - 1
    idx = np.searchsorted(edges, s, side="right") - 1
    return np.clip(idx, 0, n_cells - 1)


def first_return_distribution(series, n_cells: int = 50, edges: np.ndarray | None = None) -> ReturnHistogram:
    """First-return times to each of `n_cells` equal-width cells spanning the series range.

    Only visits whose next sample lies in another cell start a return; the
    time recorded is the number of steps until the series is back in the cell.
    Histograms are indexed by return time (entry k counts returns after k steps).
    """
    s = _values(series)
    if np.ptp(s) == 0:
        raise NoStructureError("constant series has no cell structure")
    if edges is None:
        edges = np.linspace(s.min(), s.max(), n_cells + 1)
    else:
        n_cells = edges.size - 1
    cells = cell_index(s, edges)
    order = np.lexsort((np.arange(s.size), cells))
    c_sorted, t_sorted = cells[order], order
    same = c_sorted[1:] == c_sorted[:-1]
    gap = t_sorted[1:] - t_sorted[:-1]
    valid = same & (gap > 1)
    rt_cell = c_sorted[:-1][valid]
    rt = gap[valid]
    tmax = int(rt.max()) if rt.size else 1
    per_cell = [np.bincount(rt[rt_cell == c], minlength=tmax + 1) for c in range(n_cells)]
    pooled = np.bincount(rt, minlength=tmax + 1)
    visits = np.bincount(cells, minlength=n_cells)
    return ReturnHistogram(edges=edges, per_cell=per_cell, pooled=pooled, visits=visits)


def spikes(hist: np.ndarray, rel_height: float = 0.1) -> tuple[int, np.ndarray]:
    """Dominant return time and the other local maxima above `rel_height` of the maximum."""
    h = np.asarray(hist, dtype=float)
    top = int(np.argmax(h))
    padded = np.concatenate([[-np.inf], h, [-np.inf]])
    peak = (padded[1:-1] >= padded[:-2]) & (padded[1:-1] > padded[2:]) & (h > rel_height * h[top])
    others = np.nonzero(peak)[0]
    return top, others[others != top]


@dataclass(frozen=True)
class Spectrum:
    frequency: np.ndarray
    power: np.ndarray


def power_spectrum(series, dt: float = 1.0) -> Spectrum:
    """One-sided periodogram of the mean-removed series, scaled so that sum(power) equals the variance."""
    s = _values(series)
    if s.size < 256:
        raise ValueError("power spectrum needs at least 256 samples")
    n = s.size
    X = np.fft.rfft(s - s.mean())
    p = np.abs(X) ** 2 / n**2
    p[1 : (n + 1) // 2] *= 2.0
    return Spectrum(frequency=np.fft.rfftfreq(n, d=dt), power=p)
