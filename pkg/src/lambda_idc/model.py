"""Exact dynamics of a Lambda atom driven by two Kerr fields with intensity-dependent coupling.

The interaction-picture Hamiltonian conserves N1 + N2 and the excitation
numbers, so the initial state |1; n; m> only mixes with |2; n-1; m+1> and
|3; n-1; m>. Each such 3x3 block is solved in closed form through the roots
of its characteristic cubic, and observables are sums over blocks weighted
by the coherent-state populations.

Time is the dimensionless tau = lambda * t throughout; lambda is 1 and the
Kerr strength is given as chi / lambda.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

log = logging.getLogger(__name__)

TAIL_TOL = 1e-12
DEGENERACY_TOL = 1e-8


class TruncationError(ValueError):
    """The Fock cutoff leaves more coherent-state mass outside than allowed."""


class DegenerateRootsError(ArithmeticError):
    """Two roots of a block's cubic coincide, so the b_j weights are singular."""


def default_cutoff(alpha_sq: float, tail_tol: float | None = TAIL_TOL) -> int:
    """Smallest cutoff >= ceil(|alpha|^2 + 10 |alpha|) whose Poisson tail is below `tail_tol`."""
    n = max(1, math.ceil(alpha_sq + 10.0 * math.sqrt(alpha_sq)))
    while tail_tol is not None and poisson_tail(alpha_sq, n) > tail_tol:
        n += 1
    return n


def poisson_tail(alpha_sq: float, n_max: int) -> float:
    """P(n > n_max) for a Poisson distribution of mean `alpha_sq`."""
    if alpha_sq == 0.0:
        return 0.0
    from scipy.stats import poisson

    return float(poisson.sf(n_max, alpha_sq))


@dataclass(frozen=True)
class ModelParams:
    """Physical constants and truncation for one run.

    `m0_branch` selects how blocks with m = 0 are evolved. ``"exact"`` keeps
    the field-2 emission channel (f2 = lambda at m = 0) and uses the general
    three-level solution. ``"decoupled"`` uses the two-level closed form in
    which the |2; n-1; 1> amplitude is pinned to zero.
    """

    chi: float = 5.0
    kappa: float = 0.0
    alpha: complex = 5.0
    n_max: int | None = None
    m_max: int | None = None
    lam: float = 1.0
    m0_branch: str = "exact"
    tail_tol: float | None = TAIL_TOL
    detuning: float = field(default=0.0, init=False)

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in [0, 1], got {self.kappa}")
        if self.chi < 0:
            raise ValueError(f"chi must be non-negative, got {self.chi}")
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.m0_branch not in ("exact", "decoupled"):
            raise ValueError(f"unknown m0_branch {self.m0_branch!r}")
        cut = default_cutoff(self.alpha_sq, self.tail_tol)
        if self.n_max is None:
            object.__setattr__(self, "n_max", cut)
        if self.m_max is None:
            object.__setattr__(self, "m_max", cut)
        if self.n_max < 1 or self.m_max < 1:
            raise ValueError("Fock cutoffs must be >= 1")

    @property
    def alpha_sq(self) -> float:
        return abs(self.alpha) ** 2


@dataclass(frozen=True)
class CoefficientIntermediates:
    V11: float
    V12: float
    V21: float
    V22: float
    f1: float
    f2: float
    x1: float
    x2: float
    x3: float
    theta: float
    mu: tuple[float, float, float]
    b: tuple[float, float, float]
    y1: float | None = None
    y2: float | None = None
    alpha1: float | None = None
    alpha2: float | None = None
    c1: float | None = None
    c2: float | None = None


def coherent_weights(alpha: complex, n_max: int, tail_tol: float | None = TAIL_TOL) -> np.ndarray:
    """Coherent-state amplitudes q_n for n = 0..n_max, computed in log space.

    Raises TruncationError when the discarded mass exceeds `tail_tol`
    (pass ``tail_tol=None`` to skip the check).
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    n = np.arange(n_max + 1)
    r = abs(alpha)
    if r == 0.0:
        q = np.zeros(n_max + 1, dtype=complex)
        q[0] = 1.0
        return q
    logmag = -0.5 * r * r + n * math.log(r) - 0.5 * gammaln(n + 1)
    q = np.exp(logmag) * np.exp(1j * n * np.angle(alpha))
    if tail_tol is not None:
        tail = 1.0 - np.sum(np.abs(q) ** 2)
        tail = max(tail, poisson_tail(r * r, n_max))
        if tail > tail_tol:
            raise TruncationError(
                f"cutoff n_max={n_max} leaves tail mass {tail:.3e} > {tail_tol:.0e} for |alpha|^2={r * r:g}"
            )
    return q


def _coupling(n, kappa, lam):
    return lam * np.sqrt(n) * np.sqrt(1.0 + kappa * n)


def _block_terms(n, m, chi, kappa, lam):
    """Kerr matrix elements, couplings and cubic coefficients (array-friendly)."""
    n = np.asarray(n, dtype=float)
    m = np.asarray(m, dtype=float)
    V11 = chi * n * (n - 1)
    V12 = chi * (n - 1) * (n - 2)
    V21 = chi * m * (m + 1)
    V22 = chi * m * (m - 1)
    f1 = _coupling(n, kappa, lam)
    # kappa_2 = 0
    f2 = lam * np.sqrt(m + 1)
    x1 = V11 + 2 * V12 + V21 + 2 * V22
    x2 = (V12 + V21) * (V11 + V12 + 2 * V22) + (V12 + V22) * (V11 + V22) - f1**2 - f2**2
    x3 = (V12 + V21) * ((V12 + V22) * (V11 + V22) - f1**2) - f2**2 * (V11 + V22)
    return V11, V12, V21, V22, f1, f2, x1, x2, x3


def _cubic_roots(x1, x2, x3):
    """Trigonometric roots of mu^3 + x1 mu^2 + x2 mu + x3 = 0, Newton-polished."""
    p = np.sqrt(np.maximum(x1**2 - 3 * x2, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = (9 * x1 * x2 - 2 * x1**3 - 27 * x3) / (2 * p**3)
    arg = np.clip(np.nan_to_num(arg, nan=1.0), -1.0, 1.0)
    theta = np.arccos(arg) / 3.0
    j = np.arange(3)
    mu = -x1[..., None] / 3.0 + (2.0 / 3.0) * p[..., None] * np.cos(theta[..., None] + 2.0 * np.pi * j / 3.0)
    for _ in range(3):
        val = ((mu + x1[..., None]) * mu + x2[..., None]) * mu + x3[..., None]
        der = (3 * mu + 2 * x1[..., None]) * mu + x2[..., None]
        step = np.where(der != 0, val / np.where(der != 0, der, 1.0), 0.0)
        mu = mu - step
    return theta, mu


def _root_gap(mu):
    d = np.abs(mu[..., :, None] - mu[..., None, :])
    d = np.where(np.eye(mu.shape[-1], dtype=bool), np.inf, d)
    return d.min(axis=(-1, -2)), np.abs(mu).max(axis=-1)


def _general_block(n, m, chi, kappa, lam):
    """Frequencies and (A, B, C) weights for blocks with n >= 1.

    Returns (mu, a, b, c, theta, terms) where the amplitudes are
    X(t) = sum_j x_j exp(i mu_j t). The trigonometric root formula is applied
    to the cubic of the block shifted by its excited-state Kerr energy
    V12 + V22; the shift moves every root rigidly and leaves theta unchanged,
    but keeps the coefficients small enough that close root pairs survive
    rounding.
    """
    terms = _block_terms(n, m, chi, kappa, lam)
    V11, V12, V21, V22, f1, f2, x1, x2, x3 = terms
    shift = V12 + V22
    da = V11 - V12
    db = V21 - V22
    theta, mu = _cubic_roots(da + db, da * db - f1**2 - f2**2, -da * f2**2 - db * f1**2)
    # polish against the factored determinant, which keeps close root pairs accurate
    pa, pb = da[..., None], db[..., None]
    g1, g2 = (f1**2)[..., None], (f2**2)[..., None]
    for _ in range(2):
        val = (mu + pa) * ((mu + pb) * mu - g2) - g1 * (mu + pb)
        der = (mu + pb) * mu - g2 + (mu + pa) * (2 * mu + pb) - g1
        mu = mu - np.where(der != 0, val / np.where(der != 0, der, 1.0), 0.0)
    gap, _ = _root_gap(mu)
    if np.any(gap < DEGENERACY_TOL * np.maximum(np.abs(mu - shift[..., None]).max(axis=-1), 1.0)):
        raise DegenerateRootsError("near-degenerate cubic roots")
    d01 = mu[..., 0] - mu[..., 1]
    d02 = mu[..., 0] - mu[..., 2]
    d12 = mu[..., 1] - mu[..., 2]
    denom = np.stack([d01 * d02, -d01 * d12, d02 * d12], axis=-1)
    b = (f1 * f2)[..., None] / denom
    # (mu + V12 + V21) and (mu + V12 + V22) in the shifted frame
    s21 = db[..., None]
    a = ((mu + s21) * mu - f2[..., None] ** 2) * b / (f1 * f2)[..., None]
    c = -(mu + s21) * b / f2[..., None]
    return mu - shift[..., None], a, b, c, theta, terms


def _m0_block(n, chi, kappa, lam):
    """Two-level closed form used by the decoupled m = 0 branch (B pinned to 0)."""
    n = np.asarray(n, dtype=float)
    V11 = chi * n * (n - 1)
    V12 = chi * (n - 1) * (n - 2)
    f1 = _coupling(n, kappa, lam)
    y1 = V11 + V12
    y2 = V12 * V11 - f1**2
    disc = np.sqrt(y1**2 - 4 * y2)
    al1 = 0.5 * (-y1 + disc)
    al2 = 0.5 * (-y1 - disc)
    c1 = (V11 + al2) / (al2 - al1)
    c2 = (V11 + al1) / (al1 - al2)
    return y1, y2, al1, al2, c1, c2, f1, V11


def _with_degeneracy_retry(fn, n, m, params):
    try:
        return fn(n, m, params.chi, params.kappa, params.lam)
    except DegenerateRootsError:
        chi = params.chi * (1.0 + 1e-10) if params.chi > 0 else 1e-10 * params.lam
        log.warning("near-degenerate roots at kappa=%g; perturbing chi to %r", params.kappa, chi)
        return fn(n, m, chi, params.kappa, params.lam)


def intermediates(n: int, m: int, params: ModelParams) -> CoefficientIntermediates:
    if n < 1:
        raise ValueError("the n = 0 block has no intermediates (atom stays in |1>)")
    mu, _, b, _, theta, terms = _with_degeneracy_retry(_general_block, n, m, params)
    V11, V12, V21, V22, f1, f2, x1, x2, x3 = (float(t) for t in terms)
    extra = {}
    if m == 0:
        y1, y2, al1, al2, c1, c2, _, _ = _m0_block(n, params.chi, params.kappa, params.lam)
        extra = dict(y1=float(y1), y2=float(y2), alpha1=float(al1), alpha2=float(al2), c1=float(c1), c2=float(c2))
    return CoefficientIntermediates(
        V11=V11, V12=V12, V21=V21, V22=V22, f1=f1, f2=f2, x1=x1, x2=x2, x3=x3,
        theta=float(theta), mu=tuple(float(v) for v in mu), b=tuple(float(v) for v in b), **extra,
    )


def evolve_coefficients(n: int, m: int, t: float, params: ModelParams) -> tuple[complex, complex, complex]:
    """(A_nm(t), B_nm(t), C_nm(t)) for the block seeded by |1; n; m>."""
    if n < 0 or m < 0:
        raise ValueError("Fock indices must be non-negative")
    if n > params.n_max or m > params.m_max:
        raise ValueError(f"(n, m) = ({n}, {m}) exceeds the cutoffs")
    if n == 0 or t == 0:
        return 1.0 + 0j, 0j, 0j
    if m == 0 and params.m0_branch == "decoupled":
        _, _, al1, al2, c1, c2, f1, V11 = _m0_block(n, params.chi, params.kappa, params.lam)
        e1, e2 = np.exp(1j * al1 * t), np.exp(1j * al2 * t)
        A = c1 * e1 + c2 * e2
        C = -(c1 * (al1 + V11) * e1 + c2 * (al2 + V11) * e2) / f1
        return complex(A), 0j, complex(C)
    mu, a, b, c, _, _ = _with_degeneracy_retry(_general_block, n, m, params)
    ph = np.exp(1j * mu * t)
    return complex(a @ ph), complex(b @ ph), complex(c @ ph)


def block_matrix(n: int, m: int, params: ModelParams, chi: float | None = None) -> np.ndarray:
    """The 3x3 interaction Hamiltonian on (|1;n;m>, |2;n-1;m+1>, |3;n-1;m>).

    The amplitudes obey i d/dt (A, B, C) = H (A, B, C); the diagonal holds the
    Kerr energies of the three kets, so the excited-state entry is V12 + V22.
    """
    chi = params.chi if chi is None else chi
    V11, V12, V21, V22, f1, f2, *_ = (float(v) for v in _block_terms(n, m, chi, params.kappa, params.lam))
    if m == 0 and params.m0_branch == "decoupled":
        f2 = 0.0
    return np.array(
        [
            [V11 + V22, 0.0, f1],
            [0.0, V12 + V21, f2],
            [f1, f2, V12 + V22],
        ]
    )


def ode_residual(n: int, m: int, t: float, h: float, params: ModelParams) -> np.ndarray:
    """|X'(t) + i H X(t)| per component, with X' from a central difference of step h."""
    if n < 1:
        raise ValueError("ode_residual needs n >= 1")
    if not 1e-4 <= h <= 1e-2:
        raise ValueError("h must lie in [1e-4, 1e-2]")
    xp = np.array(evolve_coefficients(n, m, t + h, params))
    xm = np.array(evolve_coefficients(n, m, t - h, params))
    x0 = np.array(evolve_coefficients(n, m, t, params))
    deriv = (xp - xm) / (2 * h)
    H = block_matrix(n, m, params)
    return np.abs(deriv + 1j * H @ x0)


@dataclass(frozen=True)
class SpectralTable:
    """Per-block frequencies and amplitude weights over the full (n, m) lattice.

    Frequencies are shifted per block by the excited-state Kerr energy; the
    shift is a block-global phase and drops out of every population.
    """

    n: np.ndarray
    m: np.ndarray
    weight: np.ndarray
    freq: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray


def spectral_table(params: ModelParams) -> SpectralTable:
    q1 = coherent_weights(params.alpha, params.n_max, params.tail_tol)
    q2 = coherent_weights(params.alpha, params.m_max, params.tail_tol)
    nn, mm = np.meshgrid(np.arange(params.n_max + 1), np.arange(params.m_max + 1), indexing="ij")
    nn, mm = nn.ravel(), mm.ravel()
    weight = (np.abs(q1[nn]) ** 2) * (np.abs(q2[mm]) ** 2)
    K = nn.size
    freq = np.zeros((K, 3))
    a = np.zeros((K, 3))
    b = np.zeros((K, 3))
    c = np.zeros((K, 3))
    a[nn == 0, 0] = 1.0

    general = nn >= 1
    if params.m0_branch == "decoupled":
        general &= mm >= 1
        sel = (nn >= 1) & (mm == 0)
        _, _, al1, al2, c1, c2, f1, V11 = _m0_block(nn[sel], params.chi, params.kappa, params.lam)
        shift = params.chi * (nn[sel] - 1) * (nn[sel] - 2)
        freq[sel, 0], freq[sel, 1] = al1 + shift, al2 + shift
        a[sel, 0], a[sel, 1] = c1, c2
        c[sel, 0], c[sel, 1] = -c1 * (al1 + V11) / f1, -c2 * (al2 + V11) / f1
    mu, ga, gb, gc, _, _ = _with_degeneracy_retry(_general_block, nn[general], mm[general], params)
    shift = params.chi * ((nn[general] - 1) * (nn[general] - 2) + mm[general] * (mm[general] - 1))
    freq[general] = mu + shift[:, None]
    a[general], b[general], c[general] = ga, gb, gc
    return SpectralTable(n=nn, m=mm, weight=weight, freq=freq, a=a, b=b, c=c)


def populations(table: SpectralTable, t, chunk: int = 256):
    """|A|^2, |B|^2, |C|^2 for every block at every time; shapes (T, K)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = [np.empty((t.size, table.n.size)) for _ in range(3)]
    for lo in range(0, t.size, chunk):
        ph = np.exp(1j * t[lo : lo + chunk, None, None] * table.freq[None])
        for dst, coef in zip(out, (table.a, table.b, table.c)):
            amp = np.einsum("tkj,kj->tk", ph, coef)
            dst[lo : lo + chunk] = amp.real**2 + amp.imag**2
    return out


def _observable_weights(table: SpectralTable, field: int):
    n, m = table.n.astype(float), table.m.astype(float)
    if field == 1:
        return n, n - 1, n - 1
    if field == 2:
        return m, m + 1, m
    raise ValueError("field must be 1 or 2")


def mean_photon_number(params: ModelParams, t, field: int = 1, table: SpectralTable | None = None, chunk: int = 64):
    """<N_field(tau)> at scalar or array `t`.

    Evaluated chunk by chunk from the block amplitudes; pass a prebuilt
    `table` to amortize the root finding across calls.
    """
    table = spectral_table(params) if table is None else table
    wa, wb, wc = _observable_weights(table, field)
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    res = np.empty(t.size)
    ca = table.weight * wa
    cb = table.weight * wb
    cc = table.weight * wc
    for lo in range(0, t.size, chunk):
        pa, pb, pc = populations(table, t[lo : lo + chunk], chunk=chunk)
        res[lo : lo + chunk] = pa @ ca + pb @ cb + pc @ cc
    return float(res[0]) if scalar else res


def atomic_population(params: ModelParams, t, level: int = 1, table: SpectralTable | None = None):
    """<sigma_ll(tau)> for atomic level 1, 2 or 3."""
    table = spectral_table(params) if table is None else table
    pops = populations(table, t)
    val = pops[level - 1] @ table.weight
    return float(val[0]) if np.ndim(t) == 0 else val


def reduced_density(params: ModelParams, t: float, field: int = 1) -> np.ndarray:
    """Reduced density matrix of field 1 or 2 at time t, over Fock indices up to the cutoff."""
    q = coherent_weights(params.alpha, params.n_max, params.tail_tol)
    r = coherent_weights(params.alpha, params.m_max, params.tail_tol)
    N, M = params.n_max, params.m_max
    A = np.zeros((N + 2, M + 2), dtype=complex)
    B = np.zeros_like(A)
    C = np.zeros_like(A)
    for n in range(N + 1):
        for m in range(M + 1):
            A[n, m], B[n, m], C[n, m] = evolve_coefficients(n, m, t, params)
    qq = np.zeros(N + 2, dtype=complex)
    qq[: N + 1] = q
    rr = np.zeros(M + 2, dtype=complex)
    rr[: M + 1] = r
    if field == 1:
        # <n|rho1|n'> = sum_l |r_l|^2 [q_n q_n'* A_nl A_n'l* + q_{n+1} q_{n'+1}* (B_{n+1,l-1} B*.. |r_{l-1}|^2 + C_{n+1,l} C*..)]
        pl = np.abs(rr[: M + 1]) ** 2
        Xa = qq[: N + 1, None] * A[: N + 1, : M + 1]
        Xc = qq[1 : N + 2, None] * C[1 : N + 2, : M + 1]
        Xb = qq[1 : N + 2, None] * B[1 : N + 2, : M + 1]
        rho = (Xa * pl) @ Xa.conj().T + (Xc * pl) @ Xc.conj().T
        # B term: sum over l >= 1 of |r_{l-1}|^2 B_{n+1,l-1} ..., i.e. over l-1 = 0..M
        rho += (Xb * pl) @ Xb.conj().T
        return rho
    if field == 2:
        # Field-2 index runs to M + 1 because the B ket carries m + 1 photons.
        pn = np.abs(qq[: N + 1]) ** 2
        pn1 = np.abs(qq[1 : N + 2]) ** 2
        Ya = A[: N + 1, : M + 1] * rr[None, : M + 1]
        Yc = C[1 : N + 2, : M + 1] * rr[None, : M + 1]
        Yb = np.zeros((N + 1, M + 2), dtype=complex)
        Yb[:, 1:] = B[1 : N + 2, : M + 1] * rr[None, : M + 1]
        rho = np.zeros((M + 2, M + 2), dtype=complex)
        rho[: M + 1, : M + 1] += (Ya.T * pn) @ Ya.conj()
        rho[: M + 1, : M + 1] += (Yc.T * pn1) @ Yc.conj()
        rho += (Yb.T * pn1) @ Yb.conj()
        return rho
    raise ValueError("field must be 1 or 2")


def generate_series(params: ModelParams, total_steps: int, burn_in: int = 10000, dt: float = 1.0):
    """Sampled <N1> at tau = burn_in + i, i = 1..total_steps - burn_in."""
    from .embedding import ScalarTimeSeries

    if total_steps <= burn_in:
        raise ValueError("total_steps must exceed burn_in")
    t = dt * np.arange(burn_in + 1, total_steps + 1)
    values = mean_photon_number(params, t, field=1)
    return ScalarTimeSeries(values=values, dt=dt, burn_in=burn_in)


def algebra_residual(kappa: float, cutoff: int) -> tuple[float, float, float]:
    """Max-entry residuals of [R,R+]-2R0, [R,R0]-kR, [R+,R0]+kR+ on the interior Fock block."""
    if cutoff < 8:
        raise ValueError("cutoff must be >= 8")
    n = np.arange(cutoff, dtype=float)
    a = np.diag(np.sqrt(n[1:]), 1)
    R = a @ np.diag(np.sqrt(1.0 + kappa * n))
    Rd = R.conj().T
    R0 = np.diag(0.5 + kappa * (n + 0.5))
    k = cutoff - 2

    def comm(x, y):
        return x @ y - y @ x

    res = (
        comm(R, Rd) - 2 * R0,
        comm(R, R0) - kappa * R,
        comm(Rd, R0) + kappa * Rd,
    )
    return tuple(float(np.abs(r[:k, :k]).max()) for r in res)
