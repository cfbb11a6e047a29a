"""Dose-response mean models: catalog, evaluation, least-squares fitting.

The package works with mean functions of the form ``mu(d) = f(d; theta)``
drawn from a fixed catalog of families.  Every family is linear in at
most two "location/scale" parameters once its nonlinear parameters are
fixed, which is what the profiled fitting strategy below exploits.

Parameter layouts (``theta`` order):

====================  =====  =================================================
family                arity  mean function
====================  =====  =================================================
emax                  3      ``e0 + emax * d / (ed50 + d)``
linear-log            2      ``b0 + b1 * log(5 d + 1)``
linear                2      ``b0 + b1 * d``
quadratic             3      ``b0 + b1 * d + b2 * d**2``
logistic              4      ``e0 + emax / (1 + exp((ed50 - d) / delta))``
exponential           3      ``b0 + b1 * exp(d / scale)``
double-logistic       8      two logistic branches spliced at d = 0.5
step                  3      ``b0 + jump * I(d >= threshold)``
truncated-logistic    4      ``e0 + emax / (1 + exp(slope * (ed50 - d)))``
====================  =====  =================================================

The double-logistic family evaluates
``a1 + b1 / (1 + exp(r1 * (m1 - d)))`` for ``d <= 0.5`` and
``a2 + b2 / (1 + exp(r2 * (d - m2)))`` for ``d > 0.5`` with theta packed
as ``(a1, b1, r1, m1, a2, b2, r2, m2)``; the splice point 0.5 is a fixed
property of the family, with the left branch owning the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
import math

import numpy as np
from scipy.optimize import minimize, minimize_scalar

__all__ = [
    "ModelFamily",
    "DoseResponseModel",
    "StageSummary",
    "ConvergenceFailure",
    "UnderdeterminedFit",
    "DegenerateDesign",
    "evaluate",
    "fit",
    "isotonic_means",
    "default_candidates",
    "true_model",
    "TRUE_MODEL_NAMES",
]


class UnderdeterminedFit(ValueError):
    """Raised when a design has fewer dose levels than model parameters."""


class DegenerateDesign(ValueError):
    """Raised when the weighted least-squares system is singular."""


class ModelFamily(str, Enum):
    """Catalog of supported dose-response mean function families."""

    EMAX = "emax"
    LINEAR_LOG = "linear-log"
    LINEAR = "linear"
    QUADRATIC = "quadratic"
    LOGISTIC = "logistic"
    EXPONENTIAL = "exponential"
    DOUBLE_LOGISTIC = "double-logistic"
    STEP = "step"
    TRUNCATED_LOGISTIC = "truncated-logistic"

    @classmethod
    def from_tag(cls, tag: str) -> "ModelFamily":
        """Resolve a user-facing tag, accepting ``_`` as a separator."""
        return cls(str(tag).strip().lower().replace("_", "-"))


PARAM_COUNT = {
    ModelFamily.EMAX: 3,
    ModelFamily.LINEAR_LOG: 2,
    ModelFamily.LINEAR: 2,
    ModelFamily.QUADRATIC: 3,
    ModelFamily.LOGISTIC: 4,
    ModelFamily.EXPONENTIAL: 3,
    ModelFamily.DOUBLE_LOGISTIC: 8,
    ModelFamily.STEP: 3,
    ModelFamily.TRUNCATED_LOGISTIC: 4,
}


@dataclass(frozen=True)
class DoseResponseModel:
    """A mean function: a family tag plus its parameter vector."""

    family: ModelFamily
    theta: tuple

    def __post_init__(self):
        family = ModelFamily(self.family)
        theta = tuple(float(t) for t in np.atleast_1d(np.asarray(self.theta, dtype=float)))
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "theta", theta)
        if len(theta) != PARAM_COUNT[family]:
            raise ValueError(
                f"{family.value} model takes {PARAM_COUNT[family]} parameters, "
                f"got {len(theta)}"
            )
        if not all(math.isfinite(t) for t in theta):
            raise ValueError(f"{family.value} parameters must be finite: {theta}")
        if family is ModelFamily.EMAX and theta[2] == 0.0:
            # ed50 may be negative (the least-squares surface genuinely has
            # minima there for non-monotone data) but never exactly zero.
            raise ValueError("emax ed50 must be nonzero")
        if family is ModelFamily.LOGISTIC and (theta[2] <= 0.0 or theta[3] <= 0.0):
            raise ValueError("logistic requires ed50 > 0 and delta > 0")
        if family is ModelFamily.EXPONENTIAL and theta[2] <= 0.0:
            raise ValueError("exponential requires scale > 0")
        if family is ModelFamily.TRUNCATED_LOGISTIC and theta[2] <= 0.0:
            raise ValueError("truncated-logistic requires slope > 0")


def evaluate(model: DoseResponseModel, dose):
    """Evaluate the mean response ``mu(dose)``.

    Parameters
    ----------
    model : DoseResponseModel
    dose : float or array_like
        Dose(s) at which to evaluate; scalars return a float.

    Returns
    -------
    float or ndarray
        Mean response under the model's closed form.  Indicator
        boundaries follow ``I(d >= threshold)`` for the step family and
        ``I(d <= 0.5)`` / ``I(d > 0.5)`` for the double-logistic splice.
    """
    d = np.asarray(dose, dtype=float)
    t = model.theta
    fam = model.family
    with np.errstate(over="ignore"):
        if fam is ModelFamily.EMAX:
            out = t[0] + t[1] * d / (t[2] + d)
        elif fam is ModelFamily.LINEAR_LOG:
            out = t[0] + t[1] * np.log(5.0 * d + 1.0)
        elif fam is ModelFamily.LINEAR:
            out = t[0] + t[1] * d
        elif fam is ModelFamily.QUADRATIC:
            out = t[0] + t[1] * d + t[2] * d * d
        elif fam is ModelFamily.LOGISTIC:
            out = t[0] + t[1] / (1.0 + np.exp((t[2] - d) / t[3]))
        elif fam is ModelFamily.EXPONENTIAL:
            out = t[0] + t[1] * np.exp(d / t[2])
        elif fam is ModelFamily.DOUBLE_LOGISTIC:
            a1, b1, r1, m1, a2, b2, r2, m2 = t
            left = a1 + b1 / (1.0 + np.exp(r1 * (m1 - d)))
            right = a2 + b2 / (1.0 + np.exp(r2 * (d - m2)))
            out = np.where(d <= 0.5, left, right)
        elif fam is ModelFamily.STEP:
            out = t[0] + t[1] * (d >= t[2])
        elif fam is ModelFamily.TRUNCATED_LOGISTIC:
            out = t[0] + t[1] / (1.0 + np.exp(t[2] * (t[3] - d)))
        else:  # pragma: no cover - enum is closed
            raise ValueError(f"unknown family {fam}")
    if np.isscalar(dose) or np.ndim(dose) == 0:
        return float(out)
    return np.asarray(out, dtype=float)


# --------------------------------------------------------------------- #
# Built-in catalogs
# --------------------------------------------------------------------- #

def default_candidates() -> tuple:
    """The standard five-model candidate set used throughout the package."""
    return (
        DoseResponseModel(ModelFamily.EMAX, (0.2, 0.7, 0.2)),
        DoseResponseModel(ModelFamily.LINEAR_LOG, (0.2, 0.6 / math.log(6.0))),
        DoseResponseModel(ModelFamily.LINEAR, (0.2, 0.6)),
        DoseResponseModel(ModelFamily.QUADRATIC, (0.2, 2.049, -1.749)),
        DoseResponseModel(ModelFamily.LOGISTIC, (0.193, 0.607, 0.4, 0.09)),
    )


_TRUE_MODELS = {
    "emax2": (ModelFamily.EMAX, (0.2, 0.6, 0.1)),
    "emax3": (ModelFamily.EMAX, (0.2, 0.55, 0.01)),
    "exponential1": (ModelFamily.EXPONENTIAL, (0.183, 0.017, 1.0 / (2.0 * math.log(6.0)))),
    "exponential2": (ModelFamily.EXPONENTIAL, (0.19924, 0.00076, 0.15)),
    "quadratic2": (ModelFamily.QUADRATIC, (0.2, 2.4, -2.4)),
    "double-logistic": (
        ModelFamily.DOUBLE_LOGISTIC,
        (0.198, 0.61, 18.0, 0.3, 0.499, 0.309, 18.0, 0.7),
    ),
    "step": (ModelFamily.STEP, (0.2, 0.6, 0.6)),
    "truncated-logistic": (ModelFamily.TRUNCATED_LOGISTIC, (0.2, 0.682, 10.0, 0.8)),
    # Flat mean; used as the null scenario in simulations.
    "flat": (ModelFamily.LINEAR, (0.2, 0.0)),
}

TRUE_MODEL_NAMES = tuple(_TRUE_MODELS)


def true_model(name: str) -> DoseResponseModel:
    """Look up one of the built-in generating models by name."""
    key = str(name).strip().lower().replace("_", "-")
    if key not in _TRUE_MODELS:
        raise KeyError(f"unknown model name {name!r}; choose from {TRUE_MODEL_NAMES}")
    fam, theta = _TRUE_MODELS[key]
    return DoseResponseModel(fam, theta)


# --------------------------------------------------------------------- #
# Stage summaries
# --------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class StageSummary:
    """Per-dose sufficient statistics for one trial stage.

    Attributes
    ----------
    doses : ndarray
        Strictly increasing dose levels; the first entry must be 0
        (placebo).
    n : ndarray of int
        Group sample sizes, all >= 1.
    means : ndarray
        Group sample means.
    ss_within : float
        Pooled within-group sum of squares across all groups in the
        stage.
    """

    doses: np.ndarray
    n: np.ndarray
    means: np.ndarray
    ss_within: float

    def __post_init__(self):
        doses = np.asarray(self.doses, dtype=float)
        n = np.asarray(self.n, dtype=int)
        means = np.asarray(self.means, dtype=float)
        ss = float(self.ss_within)
        if doses.ndim != 1 or doses.size < 1:
            raise ValueError("doses must be a 1-d vector")
        if doses[0] != 0.0:
            raise ValueError("the first dose must be 0 (placebo group)")
        if np.any(np.diff(doses) <= 0):
            raise ValueError("doses must be strictly increasing")
        if n.shape != doses.shape or means.shape != doses.shape:
            raise ValueError("doses, n and means must have matching length")
        if np.any(n < 1):
            raise ValueError("group sizes must be >= 1")
        if ss < 0 or not math.isfinite(ss):
            raise ValueError("ss_within must be finite and nonnegative")
        for arr in (doses, n, means):
            arr.flags.writeable = False
        object.__setattr__(self, "doses", doses)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "ss_within", ss)

    @property
    def k(self) -> int:
        return int(self.doses.size)

    @property
    def df(self) -> int:
        """Residual degrees of freedom ``sum(n) - k``."""
        return int(self.n.sum() - self.k)

    def pooled_variance(self) -> float:
        if self.df < 1:
            raise DegenerateDesign("no residual degrees of freedom for a variance estimate")
        return self.ss_within / self.df

    @classmethod
    def from_subjects(cls, doses, responses) -> "StageSummary":
        """Build a summary from subject-level (dose, response) pairs."""
        doses = np.asarray(doses, dtype=float)
        responses = np.asarray(responses, dtype=float)
        if doses.shape != responses.shape or doses.ndim != 1:
            raise ValueError("doses and responses must be matching 1-d vectors")
        levels = np.unique(doses)
        n = np.empty(levels.size, dtype=int)
        means = np.empty(levels.size)
        ss = 0.0
        for i, d in enumerate(levels):
            y = responses[doses == d]
            n[i] = y.size
            means[i] = y.mean()
            ss += float(np.sum((y - means[i]) ** 2))
        return cls(levels, n, means, ss)


# --------------------------------------------------------------------- #
# Weighted least-squares fitting
# --------------------------------------------------------------------- #

@dataclass(frozen=True)
class ConvergenceFailure:
    """Returned (not raised) when a nonlinear fit cannot be trusted.

    A fit fails when the refined nonlinear parameter sits on an edge of
    its search domain (within ``1e-6`` of the edge, relative to the dose
    range) or when the local refinement stops without converging.
    """

    family: ModelFamily
    reason: str
    objective: float


# Relative bounds for nonlinear parameters, as multiples of the maximum
# dose.  The emax ed50 domain is two-sided: non-monotone data can pull
# the least-squares solution to a negative ed50 (a hyperbola with its
# pole inside the dose range), and those solutions are genuine interior
# optima that the fit must be able to reach.
_NONLINEAR_REL_BOUNDS = {
    ModelFamily.EMAX: {"ed50_abs": (1e-3, 1.5)},
    ModelFamily.LOGISTIC: {"ed50": (1e-3, 1.5), "delta": (0.01, 1.5)},
    ModelFamily.EXPONENTIAL: {"scale": (0.01, 10.0)},
    ModelFamily.TRUNCATED_LOGISTIC: {"slope": (0.5, 150.0), "ed50": (1e-3, 1.5)},
}
_POLE_MARGIN_REL = 0.02   # keep-away zone around -d_i for negative emax ed50
_EDGE_TOL_REL = 1e-6
_GRID_1D = 50
_GRID_2D = 40


def _wls(design: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Weighted least squares; returns (beta, weighted SSE)."""
    wd = design * w[:, None]
    gram = wd.T @ design
    rhs = wd.T @ y
    # A singular Gram matrix means a degenerate (collinear) design.
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise DegenerateDesign("weighted design matrix is numerically singular")
    beta = np.linalg.solve(gram, rhs)
    r = y - design @ beta
    return beta, float(np.sum(w * r * r))


def _profile_sse(shape_vals: np.ndarray, y: np.ndarray, w: np.ndarray):
    """SSE of ``y ~ b0 + b1 * shape`` (weighted), solved in closed form.

    ``shape_vals`` may be (k,) or (G, k) for a grid of G shapes; returns
    matching-sized SSE along with intercept/slope arrays.
    """
    s = np.atleast_2d(shape_vals)
    sw = w.sum()
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        sx = s @ w
        sy = float(y @ w)
        sxx = (s * s) @ w
        sxy = s @ (w * y)
        det = sw * sxx - sx * sx
        slope = np.where(det > 0, (sw * sxy - sx * sy) / det, 0.0)
        intercept = (sy - slope * sx) / sw
        resid = y[None, :] - intercept[:, None] - slope[:, None] * s
        sse = np.sum(w * resid * resid, axis=1)
    # Poison flat shapes and overflowed evaluations so the grid skips
    # them; the collinearity test is row-wise and scale-free.
    good = np.isfinite(det) & (det > 1e-13 * np.maximum(sw * sxx, 1.0)) & np.isfinite(sse)
    sse = np.where(good, sse, np.inf)
    return sse, intercept, slope


def _scalar_profile(y: np.ndarray, w: np.ndarray):
    """Closure returning the profiled SSE for one shape vector.

    Same algebra as :func:`_profile_sse` but specialized for the scalar
    refinement loop, where per-call numpy overhead dominates.  The SSE
    is formed from explicit residuals: near-interpolating fits would
    lose all precision to cancellation in the usual normal-equation
    identity, and the refinement needs to resolve them.
    """
    sw = float(w.sum())
    sy = float(w @ y)
    wy = w * y

    def sse(s: np.ndarray) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            sx = float(w @ s)
            sxx = float(w @ (s * s))
        det = sw * sxx - sx * sx
        if not math.isfinite(det) or det <= 1e-13 * max(sw * sxx, 1.0):
            return math.inf
        sxy = float(wy @ s)
        slope = (sw * sxy - sx * sy) / det
        intercept = (sy - slope * sx) / sw
        r = y - intercept - slope * s
        return float(w @ (r * r))

    return sse


def _emax_segments(doses: np.ndarray, lo_abs: float, hi_abs: float):
    """Pole-free search intervals for the emax ed50.

    Positive side: ``[lo_abs, hi_abs]``.  Negative side: the intervals
    between the poles at ``-d_i`` (active doses), shrunk by a safety
    margin, intersected with ``[-hi_abs, -lo_abs]``.
    """
    dmax = float(doses.max())
    margin = _POLE_MARGIN_REL * dmax
    segments = [(lo_abs, hi_abs)]
    poles = sorted(-d for d in doses if d > 0)  # ascending, all negative
    lo = -hi_abs
    for pole in poles:
        hi = pole - margin
        if hi > lo:
            segments.append((lo, hi))
        lo = pole + margin
    if -lo_abs > lo:
        segments.append((lo, -lo_abs))
    return segments


def _fit_emax(data: StageSummary, bounds):
    doses, y, w = data.doses, data.means, data.n.astype(float)
    dmax = float(doses.max())
    lo_rel, hi_rel = _NONLINEAR_REL_BOUNDS[ModelFamily.EMAX]["ed50_abs"]
    if bounds and "ed50" in bounds:
        ed_lo, ed_hi = bounds["ed50"]
        segments = [(ed_lo, ed_hi)] if ed_lo > 0 else _emax_segments(doses, max(ed_lo, 1e-12), ed_hi)
    else:
        segments = _emax_segments(doses, lo_rel * dmax, hi_rel * dmax)

    mags = np.geomspace(lo_rel * dmax, hi_rel * dmax, _GRID_1D)
    grid = np.concatenate([mags, -mags])
    keep = np.zeros(grid.size, dtype=bool)
    for lo, hi in segments:
        keep |= (grid >= lo) & (grid <= hi)
    grid = grid[keep]
    if grid.size == 0:
        raise DegenerateDesign("empty ed50 search domain")

    shapes = doses[None, :] / (grid[:, None] + doses[None, :])
    sse, _, _ = _profile_sse(shapes, y, w)
    best = int(np.argmin(sse))
    ed0 = float(grid[best])
    seg = next((s for s in segments if s[0] <= ed0 <= s[1]), segments[0])
    profile = _scalar_profile(y, w)

    def obj(ed):
        return profile(doses / (ed + doses))

    res = minimize_scalar(obj, bounds=seg, method="bounded",
                          options={"xatol": 1e-11 * dmax, "maxiter": 500})
    ed = float(res.x)
    sse_ref, b0, b1 = _profile_sse(doses / (ed + doses), y, w)
    edge_tol = _EDGE_TOL_REL * dmax
    if min(ed - seg[0], seg[1] - ed) < edge_tol:
        return ConvergenceFailure(ModelFamily.EMAX, "ed50 pinned at search-domain edge",
                                  float(sse_ref[0]))
    if not res.success:
        return ConvergenceFailure(ModelFamily.EMAX, "refinement did not converge",
                                  float(sse_ref[0]))
    return DoseResponseModel(ModelFamily.EMAX, (float(b0[0]), float(b1[0]), ed))


def _fit_two_nonlinear(family, data: StageSummary, bounds, shape_fn, names):
    """Grid + Nelder-Mead profile fit for families with two nonlinear params."""
    doses, y, w = data.doses, data.means, data.n.astype(float)
    dmax = float(doses.max())
    rel = _NONLINEAR_REL_BOUNDS[family]
    lims = []
    for name in names:
        if bounds and name in bounds:
            lims.append(tuple(bounds[name]))
        else:
            lo, hi = rel[name]
            lims.append((lo * dmax, hi * dmax))
    g1 = np.geomspace(lims[0][0], lims[0][1], _GRID_2D)
    g2 = np.geomspace(lims[1][0], lims[1][1], _GRID_2D)
    p1, p2 = np.meshgrid(g1, g2, indexing="ij")
    shapes = shape_fn(doses[None, :], p1.ravel()[:, None], p2.ravel()[:, None])
    sse, _, _ = _profile_sse(shapes, y, w)
    best = int(np.argmin(sse))
    profile = _scalar_profile(y, w)
    log_lims = np.log(np.asarray(lims))

    # Both nonlinear parameters are positive; refining in log space keeps
    # the simplex well conditioned across their different magnitudes.
    def obj(z):
        if np.any(z < log_lims[:, 0]) or np.any(z > log_lims[:, 1]):
            return np.inf
        return profile(shape_fn(doses, math.exp(z[0]), math.exp(z[1])))

    z0 = np.log([p1.ravel()[best], p2.ravel()[best]])
    res = minimize(obj, z0, method="Nelder-Mead",
                   options={"xatol": 2e-7, "fatol": 1e-10, "maxiter": 800})
    z = np.clip(res.x, log_lims[:, 0], log_lims[:, 1])
    # Coordinate-wise polish: Nelder-Mead can stall in a curved valley a
    # touch away from the optimum; two exact line searches fix that.
    for _ in range(2):
        for j in (0, 1):
            lo = max(z[j] - 0.1, log_lims[j, 0])
            hi = min(z[j] + 0.1, log_lims[j, 1])
            if hi > lo:
                r1 = minimize_scalar(lambda t: obj(np.array([t, z[1]]) if j == 0
                                                   else np.array([z[0], t])),
                                     bounds=(lo, hi), method="bounded",
                                     options={"xatol": 1e-10, "maxiter": 200})
                z[j] = float(r1.x)
    x = np.exp(z)
    sse_ref, b0, b1 = _profile_sse(shape_fn(doses, x[0], x[1]), y, w)
    for xi, (lo, hi) in zip(x, lims):
        if min(xi - lo, hi - xi) < _EDGE_TOL_REL * (hi - lo):
            return ConvergenceFailure(family, f"nonlinear parameter pinned at bound",
                                      float(sse_ref[0]))
    if not res.success:
        return ConvergenceFailure(family, "refinement did not converge", float(sse_ref[0]))
    if family is ModelFamily.LOGISTIC:
        theta = (float(b0[0]), float(b1[0]), float(x[0]), float(x[1]))
    else:  # truncated-logistic: (e0, emax, slope, ed50)
        theta = (float(b0[0]), float(b1[0]), float(x[0]), float(x[1]))
    return DoseResponseModel(family, theta)


def _fit_one_nonlinear(family, data: StageSummary, bounds, shape_fn, name):
    doses, y, w = data.doses, data.means, data.n.astype(float)
    dmax = float(doses.max())
    if bounds and name in bounds:
        lo, hi = bounds[name]
    else:
        rel_lo, rel_hi = _NONLINEAR_REL_BOUNDS[family][name]
        lo, hi = rel_lo * dmax, rel_hi * dmax
    grid = np.geomspace(lo, hi, _GRID_1D)
    sse, _, _ = _profile_sse(shape_fn(doses[None, :], grid[:, None]), y, w)
    i0 = int(np.argmin(sse))
    bracket = (float(grid[max(i0 - 1, 0)]), float(grid[min(i0 + 1, grid.size - 1)]))
    profile = _scalar_profile(y, w)

    def obj(x):
        return profile(shape_fn(doses, x))

    res = minimize_scalar(obj, bounds=bracket, method="bounded",
                          options={"xatol": 1e-11 * dmax, "maxiter": 500})
    x = float(res.x)
    sse_ref, b0, b1 = _profile_sse(shape_fn(doses, x), y, w)
    if min(x - lo, hi - x) < _EDGE_TOL_REL * (hi - lo):
        return ConvergenceFailure(family, f"{name} pinned at bound", float(sse_ref[0]))
    if not res.success:
        return ConvergenceFailure(family, "refinement did not converge", float(sse_ref[0]))
    return DoseResponseModel(family, (float(b0[0]), float(b1[0]), x))


def fit(family: ModelFamily, data: StageSummary, bounds: dict | None = None):
    """Weighted least-squares fit of a model family to stage summaries.

    The fit minimizes ``sum_i n_i (ybar_i - f(d_i; theta))**2``, which
    coincides with the subject-level least-squares fit of the mean
    structure.  Nonlinear parameters are profiled out: a deterministic
    grid (log-spaced over the bounds) seeds a local refinement, and the
    remaining two parameters are solved in closed form.

    Parameters
    ----------
    family : ModelFamily
    data : StageSummary
    bounds : dict, optional
        Per-parameter ``(lo, hi)`` intervals for nonlinear parameters,
        keyed by name (``"ed50"``, ``"delta"``, ``"scale"``, ``"slope"``).
        Defaults scale with the dose range.

    Returns
    -------
    DoseResponseModel or ConvergenceFailure
        ``ConvergenceFailure`` signals that the refined nonlinear
        parameter sits on a search-domain edge or refinement stalled;
        callers apply their fallback policy.

    Raises
    ------
    UnderdeterminedFit
        If the design has fewer dose levels than model parameters.
    DegenerateDesign
        If the least-squares system is singular.
    """
    family = ModelFamily(family)
    k = data.k
    if k < PARAM_COUNT[family]:
        raise UnderdeterminedFit(
            f"{family.value} needs at least {PARAM_COUNT[family]} dose levels, design has {k}"
        )
    doses, y, w = data.doses, data.means, data.n.astype(float)

    if family is ModelFamily.LINEAR:
        beta, _ = _wls(np.column_stack([np.ones(k), doses]), y, w)
        return DoseResponseModel(family, tuple(beta))
    if family is ModelFamily.LINEAR_LOG:
        beta, _ = _wls(np.column_stack([np.ones(k), np.log(5.0 * doses + 1.0)]), y, w)
        return DoseResponseModel(family, tuple(beta))
    if family is ModelFamily.QUADRATIC:
        beta, _ = _wls(np.column_stack([np.ones(k), doses, doses ** 2]), y, w)
        return DoseResponseModel(family, tuple(beta))
    if family is ModelFamily.EMAX:
        return _fit_emax(data, bounds)
    if family is ModelFamily.LOGISTIC:
        return _fit_two_nonlinear(
            family, data, bounds,
            lambda d, ed50, delta: 1.0 / (1.0 + np.exp((ed50 - d) / delta)),
            ("ed50", "delta"),
        )
    if family is ModelFamily.EXPONENTIAL:
        return _fit_one_nonlinear(
            family, data, bounds, lambda d, sc: np.exp(d / sc), "scale"
        )
    if family is ModelFamily.TRUNCATED_LOGISTIC:
        return _fit_two_nonlinear(
            family, data, bounds,
            lambda d, slope, ed50: 1.0 / (1.0 + np.exp(slope * (ed50 - d))),
            ("slope", "ed50"),
        )
    if family is ModelFamily.STEP:
        # The indicator shape only changes at observed doses, so the
        # threshold search is exact over the active dose levels.
        best = None
        for thr in doses[1:]:
            s = (doses >= thr).astype(float)
            sse, b0, b1 = _profile_sse(s, y, w)
            if np.isfinite(sse[0]) and (best is None or sse[0] < best[0]):
                best = (float(sse[0]), float(b0[0]), float(b1[0]), float(thr))
        if best is None:
            raise DegenerateDesign("no admissible step threshold")
        return DoseResponseModel(family, best[1:])
    # The double-logistic family is a fixed-shape generating model; its
    # eight constants are not refit from typical (k < 8) designs.
    raise UnderdeterminedFit(
        "double-logistic has 8 parameters and is supported for data generation only"
    )


# --------------------------------------------------------------------- #
# Isotonic regression (pool adjacent violators)
# --------------------------------------------------------------------- #

def isotonic_means(means, n) -> np.ndarray:
    """Weighted nondecreasing least-squares projection of group means.

    Pool-adjacent-violators with weights ``n``.  The result preserves
    the weighted mean and is idempotent.

    Parameters
    ----------
    means : array_like
    n : array_like
        Positive weights (group sizes).

    Returns
    -------
    ndarray
        Nondecreasing fitted values, one per input entry.
    """
    y = np.asarray(means, dtype=float)
    w = np.asarray(n, dtype=float)
    if y.ndim != 1 or y.shape != w.shape or y.size < 2:
        raise ValueError("means and n must be matching 1-d vectors of length >= 2")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    # Blocks of (value, weight, count), merged while the order is violated.
    vals: list[float] = []
    wts: list[float] = []
    cnt: list[int] = []
    for yi, wi in zip(y, w):
        vals.append(float(yi))
        wts.append(float(wi))
        cnt.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            v2, w2, c2 = vals.pop(), wts.pop(), cnt.pop()
            v1, w1, c1 = vals.pop(), wts.pop(), cnt.pop()
            wt = w1 + w2
            vals.append((v1 * w1 + v2 * w2) / wt)
            wts.append(wt)
            cnt.append(c1 + c2)
    return np.repeat(vals, cnt)
