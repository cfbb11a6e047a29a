"""Optimal contrast vectors and the correlation matrix they induce.

A contrast over ``k`` dose groups is a zero-sum coefficient vector.
The power-optimal contrast for a postulated mean profile ``mu0`` under
allocation ``n`` has coefficients proportional to the allocation-
weighted centered means; all contrasts here are normalized to unit
Euclidean norm and signed to point "uphill" under their generating
profile (``sum c_i mu0_i > 0``), so that one-sided tests treat large
positive statistics as evidence of a dose-response signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import DoseResponseModel, evaluate

__all__ = [
    "DegenerateContrast",
    "ContrastSet",
    "optimal_contrast",
    "correlation_matrix",
    "build_contrast_set",
    "contrasts_for_models",
]


class DegenerateContrast(ValueError):
    """Raised when a mean profile is constant and admits no contrast."""


def optimal_contrast(mu0, n) -> np.ndarray:
    """Power-optimal contrast for the mean profile ``mu0`` under allocation ``n``.

    Coefficients are proportional to ``n_i * (mu0_i - mubar)`` with
    ``mubar`` the ``n``-weighted mean, normalized to unit Euclidean norm
    and signed so that ``sum c_i mu0_i > 0``.

    Raises
    ------
    DegenerateContrast
        If ``mu0`` is constant (up to numerical noise).
    """
    mu0 = np.asarray(mu0, dtype=float)
    n = np.asarray(n, dtype=float)
    if mu0.ndim != 1 or mu0.shape != n.shape or mu0.size < 2:
        raise ValueError("mu0 and n must be matching 1-d vectors of length >= 2")
    if np.any(n <= 0):
        raise ValueError("allocation weights must be positive")
    mubar = float(n @ mu0 / n.sum())
    c = n * (mu0 - mubar)
    norm = float(np.linalg.norm(c))
    scale = float(np.linalg.norm(n * np.abs(mu0))) + float(np.linalg.norm(n))
    if norm <= 1e-12 * scale:
        raise DegenerateContrast("constant mean profile admits no contrast")
    c = c / norm
    if float(c @ mu0) < 0:  # enforce the uphill sign convention
        c = -c
    return c


def correlation_matrix(coeffs, n) -> np.ndarray:
    """Correlation matrix of contrast statistics sharing one variance estimate.

    Entry ``(m, m')`` is ``sum_i c_mi c_m'i / n_i`` divided by the
    geometric mean of the corresponding diagonal terms.
    """
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
    n = np.asarray(n, dtype=float)
    if coeffs.shape[1] != n.size:
        raise ValueError("contrast length must match the allocation vector")
    if np.any(np.linalg.norm(coeffs, axis=1) == 0):
        raise ValueError("contrast rows must be nonzero")
    gram = (coeffs / n) @ coeffs.T
    d = np.sqrt(np.diag(gram))
    corr = gram / np.outer(d, d)
    np.fill_diagonal(corr, 1.0)
    return corr


@dataclass(frozen=True, eq=False)
class ContrastSet:
    """A bank of contrasts over a common design.

    Attributes
    ----------
    coeffs : ndarray, shape (M, k)
        One zero-sum, unit-norm contrast per row.
    doses : ndarray, shape (k,)
    n : ndarray of int, shape (k,)
        Allocation the contrasts were optimized for.
    corr : ndarray, shape (M, M)
        Correlation matrix of the induced test statistics.
    """

    coeffs: np.ndarray
    doses: np.ndarray
    n: np.ndarray
    corr: np.ndarray

    def __post_init__(self):
        coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        doses = np.asarray(self.doses, dtype=float)
        n = np.asarray(self.n, dtype=int)
        corr = np.asarray(self.corr, dtype=float)
        if coeffs.shape[1] != doses.size or n.size != doses.size:
            raise ValueError("coeffs, doses and n dimensions are inconsistent")
        if corr.shape != (coeffs.shape[0], coeffs.shape[0]):
            raise ValueError("corr must be M x M")
        if np.max(np.abs(coeffs.sum(axis=1))) > 1e-8:
            raise ValueError("contrast rows must sum to zero")
        if np.max(np.abs(np.linalg.norm(coeffs, axis=1) - 1.0)) > 1e-8:
            raise ValueError("contrast rows must have unit norm")
        for arr in (coeffs, doses, n, corr):
            arr.flags.writeable = False
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "doses", doses)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "corr", corr)

    @property
    def m(self) -> int:
        return int(self.coeffs.shape[0])

    @property
    def k(self) -> int:
        return int(self.coeffs.shape[1])


def build_contrast_set(rows, doses, n) -> ContrastSet:
    """Assemble a ContrastSet from precomputed contrast rows."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    n = np.asarray(n, dtype=int)
    return ContrastSet(rows, np.asarray(doses, dtype=float), n,
                       correlation_matrix(rows, n.astype(float)))


def contrasts_for_models(models, doses, n) -> ContrastSet:
    """Optimal contrasts for a list of candidate models at a design.

    Parameters
    ----------
    models : sequence of DoseResponseModel
    doses : array_like
    n : array_like of int
        Group allocation.
    """
    doses = np.asarray(doses, dtype=float)
    n = np.asarray(n, dtype=int)
    rows = [optimal_contrast(evaluate(m, doses), n.astype(float)) for m in models]
    return build_contrast_set(np.array(rows), doses, n)
