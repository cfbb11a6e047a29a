"""Multivariate normal/t box probabilities, equicoordinate quantiles, and
chi-square mixture orthant integrals.

All probabilities are one-sided boxes ``P(X <= upper)`` (componentwise)
under a centered normal or location-scale t law.  Dimensions 1 and 2
are evaluated in closed form (scalar CDFs and Owen's T); higher
dimensions use randomized quasi-Monte Carlo over the sequential
separation-of-variables reparameterization: a fixed Sobol point set
with ``shifts`` independent Cranley-Patterson rotations, whose spread
yields the reported standard error.  Every stochastic routine takes a
seed, keeps no process-global state, and is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri, owens_t, stdtr, stdtrit
from scipy.stats import chi2, qmc

__all__ = [
    "NumericalDomainError",
    "EquiProbQuery",
    "bvn_cdf",
    "gaussian_box_prob",
    "t_box_prob",
    "mv_cdf_upper_tail",
    "mv_equicoordinate_quantile",
    "conditional_t_orthant",
]

_U_EPS = 1e-16          # clip for ndtri arguments
_MAX_LOG2_POINTS = 16   # hard cap on points per randomization


class NumericalDomainError(ValueError):
    """Raised for inputs outside the numerical domain (e.g. non-PSD matrices)."""


# --------------------------------------------------------------------- #
# Shared low-level pieces
# --------------------------------------------------------------------- #

_SOBOL_BASE: dict = {}


def _sobol_base(dim: int, log2_n: int) -> np.ndarray:
    """Unscrambled Sobol points, cached per (dim, log2 n)."""
    key = (dim, log2_n)
    if key not in _SOBOL_BASE:
        pts = qmc.Sobol(d=dim, scramble=False).random_base2(log2_n)
        pts.flags.writeable = False
        _SOBOL_BASE[key] = pts
    return _SOBOL_BASE[key]


def _chol_psd(mat: np.ndarray) -> np.ndarray:
    """Cholesky factor with a tiny escalating ridge for semi-definite input."""
    mat = np.asarray(mat, dtype=float)
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise NumericalDomainError("matrix is not symmetric")
    eye = np.eye(mat.shape[0])
    for eps in (0.0, 1e-12, 1e-10, 1e-8):
        try:
            return np.linalg.cholesky(mat + eps * eye)
        except np.linalg.LinAlgError:
            continue
    raise NumericalDomainError("matrix is not positive semi-definite")


def _standardize(cov, upper):
    cov = np.asarray(cov, dtype=float)
    upper = np.asarray(upper, dtype=float)
    sd = np.sqrt(np.diag(cov))
    if np.any(sd <= 0):
        raise NumericalDomainError("covariance has nonpositive diagonal")
    corr = cov / np.outer(sd, sd)
    if np.any(np.abs(corr) > 1.0 + 1e-10):
        raise NumericalDomainError("matrix is not a valid covariance "
                                   "(off-diagonal exceeds the diagonal scale)")
    return corr, upper / sd


def bvn_cdf(h: float, k: float, rho: float) -> float:
    """Standard bivariate normal ``P(X <= h, Y <= k)`` via Owen's T."""
    if math.isnan(h) or math.isnan(k):
        return float("nan")
    if rho >= 1.0 - 1e-14:
        return float(ndtr(min(h, k)))
    if rho <= -1.0 + 1e-14:
        return float(max(0.0, ndtr(h) + ndtr(k) - 1.0))
    if h == math.inf:
        return float(ndtr(k))
    if k == math.inf:
        return float(ndtr(h))
    if h == -math.inf or k == -math.inf:
        return 0.0
    if h == 0.0 and k == 0.0:
        return 0.25 + math.asin(rho) / (2.0 * math.pi)
    s = math.sqrt((1.0 - rho) * (1.0 + rho))
    # Owen (1956) decomposition; a zero coordinate uses the limit
    # T(h -> 0, a_h) -> sign(k)/4, which collapses to a single Owen term:
    # Phi2(0, k, rho) = Phi(k)/2 - T(k, -rho/s).
    if h == 0.0:
        return float(min(1.0, max(0.0, 0.5 * ndtr(k) - owens_t(k, -rho / s))))
    if k == 0.0:
        return float(min(1.0, max(0.0, 0.5 * ndtr(h) - owens_t(h, -rho / s))))
    val = 0.5 * (ndtr(h) + ndtr(k))
    val -= owens_t(h, (k - rho * h) / (h * s))
    val -= owens_t(k, (h - rho * k) / (k * s))
    if h * k < 0.0:
        val -= 0.5
    return float(min(1.0, max(0.0, val)))


def gaussian_box_prob(cov, upper, seed, *, target_se: float = 1e-4,
                      min_log2: int = 10, max_log2: int = _MAX_LOG2_POINTS,
                      shifts: int = 8):
    """``P(X <= upper)`` for ``X ~ N(0, cov)`` with general upper limits.

    Parameters
    ----------
    cov : array_like, shape (M, M)
        Covariance (any positive diagonal; standardized internally).
    upper : array_like, shape (M,)
        Componentwise upper limits; +/-inf entries are handled.
    seed : int or numpy Generator
        Drives the Cranley-Patterson shifts; fixed seed => fixed output.
    target_se : float
        Point doubling stops once the randomization standard error is
        at or below this value (dimensions >= 3 only).

    Returns
    -------
    (prob, se) : tuple of float
        Estimate and its randomization standard error (0.0 when the
        value is computed in closed form).
    """
    corr, u = _standardize(cov, upper)
    m = u.size
    if np.any(np.isnan(u)):
        return float("nan"), 0.0
    if np.any(u == -math.inf):
        return 0.0, 0.0
    finite = u != math.inf
    if not np.any(finite):
        return 1.0, 0.0
    if finite.sum() < m:
        idx = np.where(finite)[0]
        return gaussian_box_prob(corr[np.ix_(idx, idx)], u[idx], seed,
                                 target_se=target_se, min_log2=min_log2,
                                 max_log2=max_log2, shifts=shifts)
    if m == 1:
        return float(ndtr(u[0])), 0.0
    if m == 2:
        return bvn_cdf(float(u[0]), float(u[1]), float(corr[0, 1])), 0.0
    L = _chol_psd(corr)
    rng = _as_generator(seed)
    log2_n = min_log2
    while True:
        est, se = _genz_rqmc(L, u, None, None, rng_state=rng, log2_n=log2_n, shifts=shifts)
        if se <= target_se or log2_n >= max_log2:
            return est, se
        log2_n += 1


def t_box_prob(cov, upper, df, seed, *, target_se: float = 1e-4,
               min_log2: int = 10, max_log2: int = _MAX_LOG2_POINTS,
               shifts: int = 8):
    """``P(T <= upper)`` for a central location-scale multivariate t.

    ``T = X / sqrt(W/df)`` with ``X ~ N(0, cov)`` and ``W ~ chi2(df)``
    shared across components (common denominator).  ``df = inf`` falls
    back to the Gaussian box.
    """
    if math.isinf(df):
        return gaussian_box_prob(cov, upper, seed, target_se=target_se,
                                 min_log2=min_log2, max_log2=max_log2, shifts=shifts)
    if df < 1:
        raise NumericalDomainError("df must be >= 1")
    corr, u = _standardize(cov, upper)
    m = u.size
    if np.any(np.isnan(u)):
        return float("nan"), 0.0
    if np.any(u == -math.inf):
        return 0.0, 0.0
    finite = u != math.inf
    if not np.any(finite):
        return 1.0, 0.0
    if finite.sum() < m:
        idx = np.where(finite)[0]
        return t_box_prob(corr[np.ix_(idx, idx)], u[idx], df, seed,
                          target_se=target_se, min_log2=min_log2,
                          max_log2=max_log2, shifts=shifts)
    if m == 1:
        return float(stdtr(df, u[0])), 0.0
    if m == 2:
        rho = float(corr[0, 1])
        h, k = float(u[0]), float(u[1])

        def integrand(p):
            s = math.sqrt(chi2.ppf(p, df) / df)
            return bvn_cdf(s * h, s * k, rho)

        val, _ = quad(integrand, 0.0, 1.0, epsabs=1e-10, epsrel=1e-10, limit=200)
        return float(min(1.0, max(0.0, val))), 0.0
    L = _chol_psd(corr)
    rng = _as_generator(seed)
    log2_n = min_log2
    while True:
        est, se = _genz_rqmc(L, u, df, _chi_ppf_table(df), rng_state=rng,
                             log2_n=log2_n, shifts=shifts)
        if se <= target_se or log2_n >= max_log2:
            return est, se
        log2_n += 1


def _as_generator(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


_CHI_PPF_CACHE: dict = {}


def _chi_ppf_table(df: int):
    """chi2 quantile table on a probit grid, for fast interpolated ppf."""
    df = int(df)
    if df not in _CHI_PPF_CACHE:
        z = np.linspace(-8.2, 8.2, 4097)
        table = chi2.ppf(ndtr(z), df)
        _CHI_PPF_CACHE[df] = (z, table)
    return _CHI_PPF_CACHE[df]


def _genz_rqmc(L, u, df, chi_table, *, rng_state, log2_n, shifts):
    """Sequential conditional sampling estimate of a normal/t box.

    One Sobol base set; each randomization applies a Cranley-Patterson
    shift.  For finite ``df`` the first coordinate carries the shared
    chi-square denominator (limits scale with ``sqrt(W/df)`` per point).
    """
    m = u.size
    dim = (m - 1) + (0 if df is None else 1)
    base = _sobol_base(max(dim, 1), log2_n)
    npts = base.shape[0]
    ests = np.empty(shifts)
    for r in range(shifts):
        x = base + rng_state.random(base.shape[1])
        x -= np.floor(x)
        col = 0
        if df is None:
            lim = np.broadcast_to(u, (npts, m))
        else:
            zq = ndtri(np.clip(x[:, 0], _U_EPS, 1.0 - _U_EPS))
            zgrid, table = chi_table
            w = np.interp(zq, zgrid, table)
            s = np.sqrt(w / df)
            lim = s[:, None] * u[None, :]
            col = 1
        e = ndtr(lim[:, 0] / L[0, 0])
        p = e.copy()
        ys = np.empty((npts, m - 1))
        for i in range(1, m):
            z = ndtri(np.clip(x[:, col + i - 1] * e, _U_EPS, 1.0 - _U_EPS))
            ys[:, i - 1] = z
            cond = lim[:, i] - ys[:, :i] @ L[i, :i]
            e = ndtr(cond / L[i, i])
            p *= e
        ests[r] = p.mean()
    return float(ests.mean()), float(ests.std(ddof=1) / math.sqrt(shifts))


def _genz_rqmc_batch(L, uppers, *, seed, log2_n=11, shifts=8):
    """Gaussian box probabilities for a batch of upper-limit vectors.

    ``uppers`` has shape (B, M); all rows share the same correlation
    Cholesky factor ``L`` and the same randomized point set, so the
    estimates are smoothly coupled across the batch (useful inside
    outer quadratures).  Returns shape-(B,) estimates.
    """
    U = np.atleast_2d(np.asarray(uppers, dtype=float))
    nb, m = U.shape
    if m == 1:
        return ndtr(U[:, 0] / L[0, 0])
    base = _sobol_base(m - 1, log2_n)
    npts = base.shape[0]
    rng = _as_generator(seed)
    acc = np.zeros(nb)
    for r in range(shifts):
        x = base + rng.random(m - 1)
        x -= np.floor(x)
        e = ndtr(U[:, :1] / L[0, 0]) * np.ones((1, npts))
        p = e.copy()
        ys = np.empty((nb, npts, m - 1))
        for i in range(1, m):
            z = ndtri(np.clip(x[None, :, i - 1] * e, _U_EPS, 1.0 - _U_EPS))
            ys[:, :, i - 1] = z
            cond = U[:, i, None] - ys[:, :, :i] @ L[i, :i]
            e = ndtr(cond / L[i, i])
            p *= e
        acc += p.mean(axis=1)
    return acc / shifts


# --------------------------------------------------------------------- #
# Public query-level operations
# --------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class EquiProbQuery:
    """An equicoordinate upper-tail query.

    ``P(all components <= bound)`` is evaluated under a multivariate
    normal (``df = inf``) or location-scale t law with correlation
    ``corr``, componentwise mean ``shift`` and overall covariance scale
    ``scale`` (e.g. 0.5 for a conditional second-stage law).
    """

    corr: np.ndarray
    shift: np.ndarray
    df: float
    bound: float
    scale: float = 1.0

    def __post_init__(self):
        corr = np.asarray(self.corr, dtype=float)
        shift = np.broadcast_to(np.asarray(self.shift, dtype=float), (corr.shape[0],)).copy()
        object.__setattr__(self, "corr", corr)
        object.__setattr__(self, "shift", shift)
        object.__setattr__(self, "df", float(self.df))
        object.__setattr__(self, "bound", float(self.bound))
        object.__setattr__(self, "scale", float(self.scale))
        if self.scale <= 0:
            raise NumericalDomainError("scale must be positive")
        if not math.isinf(self.df) and self.df < 1:
            raise NumericalDomainError("df must be >= 1 or inf")


def mv_cdf_upper_tail(query: EquiProbQuery, seed, *, target_se: float = 1e-4) -> float:
    """``1 - P(all components <= bound)`` for the queried law.

    Randomized QMC with reported standard error at most ``target_se``
    in dimensions >= 3; closed forms below that.  Deterministic for a
    fixed seed.
    """
    u = (query.bound - query.shift) / math.sqrt(query.scale)
    p, _ = t_box_prob(query.corr, u, query.df, seed, target_se=target_se)
    return float(min(1.0, max(0.0, 1.0 - p)))


def mv_equicoordinate_quantile(corr, df, level: float, seed, *,
                               prob_tol: float = 5e-4) -> float:
    """Common bound ``b`` with ``P(all components <= b) = level``.

    Safeguarded root finding (Brent) between the trivial bound
    ``q(level)`` and the Bonferroni bound ``q(1 - (1-level)/M)``, where
    ``q`` is the scalar normal/t quantile.

    Parameters
    ----------
    corr : correlation matrix
    df : float
        Degrees of freedom; ``inf`` for the Gaussian case.
    level : float in (0, 1)
    seed : int or Generator
        A fixed point set is reused across root iterations, making the
        bracketing function smooth and the result reproducible.
    prob_tol : float
        Tolerance on the achieved probability.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    corr = np.asarray(corr, dtype=float)
    m = corr.shape[0]
    df = float(df)
    if m == 1:
        return float(ndtri(level)) if math.isinf(df) else float(stdtrit(df, level))
    q = (lambda p: float(ndtri(p))) if math.isinf(df) else (lambda p: float(stdtrit(df, p)))
    lo = q(level) - 1e-9
    hi = q(1.0 - (1.0 - level) / m) + 1e-9
    seed_int = int(_as_generator(seed).integers(2 ** 63)) if isinstance(seed, np.random.Generator) else int(seed)

    def f(b):
        p, _ = t_box_prob(corr, np.full(m, b), df, seed_int, target_se=prob_tol / 3.0)
        return p - level

    flo, fhi = f(lo), f(hi)
    # The exact brackets can fail only through Monte Carlo error; widen a bit.
    while flo > 0:
        lo -= 0.5
        flo = f(lo)
    while fhi < 0:
        hi += 0.5
        fhi = f(hi)
    return float(brentq(f, lo, hi, xtol=max(prob_tol / 10.0, 1e-6)))


def conditional_t_orthant(cov, b, q: float, nu_chisq: int, nu_divisor: int,
                          bound: float, seed: int = 0, *, tol: float = 1e-3,
                          gl_nodes: int = 64, qmc_log2: int = 11) -> float:
    """Upper-orthant-complement probability of a conditional t-type law.

    Evaluates ``1 - E_W[ P(X <= bound * sqrt(W/nu_divisor + q) - b) ]``
    where ``W ~ chi2(nu_chisq)`` and ``X ~ N(0, cov)``: the probability
    that at least one component of ``(b + X) / sqrt(W/nu_divisor + q)``
    exceeds ``bound``.  This is the conditional law of contrast t
    statistics given first-stage data, reduced to a one-dimensional
    integral over the chi-square weight with a Gaussian box inside.

    Parameters
    ----------
    cov : array_like
        Covariance of the Gaussian numerator; general positive diagonal
        (conditional covariances arrive un-normalized).
    b : array_like
        Conditional shift numerators (finite).
    q : float >= 0
        Constant variance offset carried by the conditioning stage.
    nu_chisq, nu_divisor : int
        Chi-square degrees of freedom of ``W`` and the divisor in
        ``W/nu_divisor``.
    bound : float
        Common upper limit; ``+inf`` returns 0.
    tol : float
        Absolute tolerance of the outer quadrature.

    Notes
    -----
    Dimensions 1-2 use adaptive Gauss-Kronrod on ``w`` over
    ``[0, W_max]`` (chi-square tail beyond ``W_max`` below 1e-10) with
    a closed-form inner box.  Higher dimensions use fixed Gauss-Legendre
    nodes in the chi-square probability transform with a batched
    randomized-QMC inner box sharing one point set across nodes.
    """
    cov = np.asarray(cov, dtype=float)
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise ValueError("shift numerators b must be finite")
    if q < 0:
        raise ValueError("q must be nonnegative")
    if nu_chisq < 1 or nu_divisor < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if bound == math.inf:
        return 0.0
    sd = np.sqrt(np.diag(cov))
    if np.any(sd <= 0):
        raise NumericalDomainError("covariance has nonpositive diagonal")
    corr = cov / np.outer(sd, sd)
    m = b.size

    if m <= 2:
        rho = float(corr[0, 1]) if m == 2 else 0.0

        def inner(w):
            s = math.sqrt(w / nu_divisor + q)
            u = (bound * s - b) / sd
            if m == 1:
                box = float(ndtr(u[0]))
            else:
                box = bvn_cdf(float(u[0]), float(u[1]), rho)
            return chi2.pdf(w, nu_chisq) * box

        w_max = float(chi2.ppf(1.0 - 1e-10, nu_chisq))
        val, _ = quad(inner, 0.0, w_max, epsabs=min(tol / 4.0, 2.5e-4),
                      epsrel=1e-8, limit=300)
        return float(min(1.0, max(0.0, 1.0 - val)))

    # M >= 3: Gauss-Legendre in the probability transform of W, batched
    # RQMC inner boxes (one shared point set keeps the integrand smooth).
    L = _chol_psd(corr)
    nodes, weights = np.polynomial.legendre.leggauss(gl_nodes)
    u01 = 0.5 * (nodes + 1.0)
    wts = 0.5 * weights
    w = chi2.ppf(u01, nu_chisq)
    s = np.sqrt(w / nu_divisor + q)
    uppers = (bound * s[:, None] - b[None, :]) / sd[None, :]
    boxes = _genz_rqmc_batch(L, uppers, seed=seed, log2_n=qmc_log2)
    val = float(wts @ boxes)
    return float(min(1.0, max(0.0, 1.0 - val)))
