"""Delay embedding and the maximal Lyapunov exponent of a scalar series."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)


class NoStructureError(ValueError):
    """The series carries no usable temporal structure (e.g. it is constant)."""


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class ScalarTimeSeries:
    values: np.ndarray
    dt: float = 1.0
    burn_in: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError("series must be one-dimensional")
        if not np.all(np.isfinite(v)):
            raise ValueError("series contains non-finite values")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class EmbeddedCloud:
    vectors: np.ndarray
    t_d: int
    d_emb: int

    def __len__(self):
        return self.vectors.shape[0]


def _values(series) -> np.ndarray:
    if isinstance(series, ScalarTimeSeries):
        return series.values
    return np.asarray(series, dtype=float)


def delay_embed(series, t_d: int, d_emb: int) -> EmbeddedCloud:
    """Vectors [s(j), s(j + t_d), ..., s(j + (d_emb - 1) t_d)] for every admissible j."""
    s = _values(series)
    if t_d < 1 or d_emb < 1:
        raise ValueError("t_d and d_emb must be positive")
    n_vec = s.size - (d_emb - 1) * t_d
    if n_vec < 1:
        raise InsufficientDataError(f"series of length {s.size} too short for d_emb={d_emb}, t_d={t_d}")
    vectors = np.lib.stride_tricks.sliding_window_view(s, (d_emb - 1) * t_d + 1)[:, ::t_d]
    return EmbeddedCloud(vectors=np.ascontiguousarray(vectors), t_d=t_d, d_emb=d_emb)


def mutual_information(s: np.ndarray, lag: int, bins: int = 64) -> float:
    """Histogram estimate (nats) of I(s(i); s(i + lag)) with equal-width bins."""
    x, y = s[:-lag] if lag else s, s[lag:]
    lo, hi = s.min(), s.max()
    idx = lambda v: np.minimum(((v - lo) / (hi - lo) * bins).astype(int), bins - 1)  # noqa: E731
    joint = np.bincount(idx(x) * bins + idx(y), minlength=bins * bins).reshape(bins, bins) / x.size
    px, py = joint.sum(1), joint.sum(0)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(px, py)[nz])))


def autocorrelation(s: np.ndarray, max_lag: int) -> np.ndarray:
    x = s - s.mean()
    var = np.dot(x, x)
    return np.array([np.dot(x[:-k], x[k:]) / var if k else 1.0 for k in range(max_lag + 1)])


def select_delay(series, max_lag: int = 200, bins: int = 64) -> int:
    """First local minimum of the average mutual information over lags 1..max_lag.

    AMI values closer than the estimator's sampling noise under independence,
    3 (bins - 1) / n_pairs nats, count as ties. A lag whose AMI already sits
    at the independence bias floor (bins - 1)^2 / (2 n_pairs) is returned
    immediately, and a flat minimum resolves to the middle of its plateau.
    Falls back to the first lag at which the autocorrelation drops below 1/e.
    """
    s = _values(series)
    if s.size < 1000:
        raise InsufficientDataError("delay selection needs at least 1000 samples")
    if np.ptp(s) == 0:
        raise NoStructureError("constant series has no delay structure")
    max_lag = min(max_lag, s.size // 4)
    ami = np.array([mutual_information(s, k, bins) for k in range(1, max_lag + 2)])
    pairs = s.size - np.arange(1, max_lag + 2)
    tol = 3.0 * (bins - 1) / pairs
    floor = (bins - 1) ** 2 / (2.0 * pairs)
    for k in range(max_lag):
        if ami[k] <= floor[k] + tol[k]:
            return k + 1
        if ami[k + 1] > ami[k] + tol[k]:
            return int(round(0.5 * (_plateau_start(ami, k, tol[k]) + k))) + 1
    acf = autocorrelation(s, max_lag)
    below = np.nonzero(acf[1:] < 1.0 / np.e)[0]
    if below.size:
        return int(below[0] + 1)
    raise NoStructureError("neither mutual information nor autocorrelation yields a delay")


def _plateau_start(ami, k, tol):
    j = k
    while j > 0 and abs(ami[j - 1] - ami[k]) <= tol:
        j -= 1
    return j


def false_nearest_fraction(s: np.ndarray, t_d: int, d: int, ratio: float = 10.0) -> float:
    """Fraction of nearest neighbours in dimension d that separate by more than
    `ratio` times their distance once coordinate d + 1 is added."""
    n = s.size - d * t_d
    if n < 10:
        raise InsufficientDataError("series too short for false-nearest-neighbour test")
    pts = delay_embed(s, t_d, d).vectors[:n]
    extra = s[d * t_d : d * t_d + n]
    dist, idx = cKDTree(pts).query(pts, k=2)
    dist, idx = dist[:, 1], idx[:, 1]
    jump = np.abs(extra - extra[idx])
    # distances at rounding level count as exact repeats
    floor = 1e-10 * max(np.ptp(s), np.finfo(float).tiny)
    return float(np.mean(jump > ratio * np.maximum(dist, floor)))


@dataclass(frozen=True)
class DimensionChoice:
    d_emb: int
    fractions: tuple
    capped: bool = False

    def __int__(self):
        return self.d_emb


def select_dimension(series, t_d: int, max_dim: int = 12, threshold: float = 0.01, ratio: float = 10.0) -> DimensionChoice:
    """Smallest d whose false-nearest-neighbour fraction is below `threshold`."""
    s = _values(series)
    if np.ptp(s) == 0:
        raise NoStructureError("constant series cannot be embedded meaningfully")
    fracs = []
    for d in range(1, max_dim + 1):
        fracs.append(false_nearest_fraction(s, t_d, d, ratio))
        if fracs[-1] < threshold:
            return DimensionChoice(d, tuple(fracs))
    log.warning("false-nearest-neighbour fraction never fell below %g; capping d_emb at %d", threshold, max_dim)
    return DimensionChoice(max_dim, tuple(fracs), capped=True)


@dataclass
class LyapunovResult:
    """Rosenstein divergence curve and its fitted slope."""

    exponent: float
    r2: float
    steps: np.ndarray
    divergence: np.ndarray
    fit_range: tuple
    theiler: int
    valid_fraction: float
    meta: dict = field(default_factory=dict)

    @property
    def linear(self) -> bool:
        return self.r2 > 0.9


def _nearest_outside_window(tree, pts, usable, theiler):
    """Index of the nearest neighbour j with |i - j| > theiler and j < usable."""
    n = usable
    best = np.full(n, -1)
    k = min(2 * theiler + 4, pts.shape[0])
    todo = np.arange(n)
    while todo.size:
        dist, idx = tree.query(pts[todo], k=k)
        ok = (np.abs(idx - todo[:, None]) > theiler) & (idx < usable)
        has = ok.any(axis=1)
        first = ok.argmax(axis=1)
        best[todo[has]] = idx[has, first[has]]
        todo = todo[~has]
        if k >= pts.shape[0]:
            break
        k = min(2 * k, pts.shape[0])
    return best


def lyapunov_divergence(
    cloud: EmbeddedCloud,
    theiler: int | None = None,
    fit_range: tuple = (1, 30),
    dt: float = 1.0,
    max_refs: int | None = None,
) -> LyapunovResult:
    """Rosenstein estimate of the maximal Lyapunov exponent.

    Each reference vector is paired with its nearest neighbour outside a
    Theiler window; the mean log distance of the pair followed for
    k = 0..fit_range[1] steps is fitted by least squares over fit_range.
    `max_refs` takes an evenly strided subset of references (off by default).
    """
    if theiler is None:
        theiler = cloud.t_d * cloud.d_emb
    lo, hi = fit_range
    if not 0 <= lo < hi:
        raise ValueError("fit_range must satisfy 0 <= start < end")
    pts = cloud.vectors
    usable = pts.shape[0] - hi
    if usable < 2 * theiler + 2:
        raise InsufficientDataError("cloud too small for the requested Theiler window and fit range")
    tree = cKDTree(pts[:usable])
    nbr = _nearest_outside_window(tree, pts[:usable], usable, theiler)
    refs = np.nonzero(nbr >= 0)[0]
    valid_fraction = refs.size / usable
    if valid_fraction < 0.5:
        raise InsufficientDataError(f"only {valid_fraction:.0%} of reference points have a valid neighbour")
    if max_refs is not None and refs.size > max_refs:
        refs = refs[:: int(np.ceil(refs.size / max_refs))]
    steps = np.arange(hi + 1)
    div = np.empty(steps.size)
    for k in steps:
        d = np.linalg.norm(pts[refs + k] - pts[nbr[refs] + k], axis=1)
        d = d[d > 0]
        div[k] = np.mean(np.log(d)) if d.size else np.nan
    x = steps[lo : hi + 1] * dt
    y = div[lo : hi + 1]
    good = np.isfinite(y)
    if good.sum() < 2:
        slope, r2 = 0.0, 0.0
    else:
        slope, icpt = np.polyfit(x[good], y[good], 1)
        resid = y[good] - (slope * x[good] + icpt)
        ss = np.sum((y[good] - y[good].mean()) ** 2)
        r2 = float(1.0 - resid @ resid / ss) if ss > 0 else 0.0
    return LyapunovResult(
        exponent=float(slope), r2=r2, steps=steps, divergence=div, fit_range=(lo, hi),
        theiler=theiler, valid_fraction=valid_fraction,
    )


def max_lyapunov(cloud: EmbeddedCloud, mean_period_exclusion: int | None = None, fit_range: tuple = (1, 30), **kw) -> float:
    return lyapunov_divergence(cloud, mean_period_exclusion, fit_range, **kw).exponent
