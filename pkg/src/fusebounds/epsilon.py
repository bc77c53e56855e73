"""Outcome-ratio sensitivity framework: modified ATE estimators over a box.

The two sensitivity parameters are cross-arm outcome ratios, restricted to
constants: ``eps1`` rescales the treated-arm outcome model when imputing the
untreated, ``eps0`` the control-arm model when imputing the treated. The
point (1, 1) is the no-unmeasured-confounding point, at which every modified
estimator reduces exactly to its original counterpart.

Estimator kernels take nuisance predictions as plain arrays so the same code
serves the full cohort, the trial-ineligible subset, and bootstrap replicates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .bounds import BoundResult
from .regress import (
    EstimationError,
    FittedModel,
    add_intercept,
    design_columns,
    fit_logistic,
    fit_ols,
    predict,
)

NO_CONFOUNDING = (1.0, 1.0)
ESTIMATORS = ("or", "ht", "hajek", "dr")


@dataclass(frozen=True)
class EpsilonPoint:
    """One sensitivity coordinate; both ratios must be strictly positive."""

    eps1: float
    eps0: float

    def __post_init__(self) -> None:
        if not (self.eps1 > 0.0 and self.eps0 > 0.0):
            raise ValueError("sensitivity ratios must be strictly positive")


@dataclass(frozen=True)
class EpsilonBox:
    """Rectangular range for (eps1, eps0) with a tensor evaluation grid."""

    eps1_range: tuple[float, float]
    eps0_range: tuple[float, float]
    grid_resolution: int = 11

    def __post_init__(self) -> None:
        object.__setattr__(self, "eps1_range", (float(self.eps1_range[0]), float(self.eps1_range[1])))
        object.__setattr__(self, "eps0_range", (float(self.eps0_range[0]), float(self.eps0_range[1])))
        for lo, hi in (self.eps1_range, self.eps0_range):
            if not (0.0 < lo <= hi):
                raise ValueError(f"invalid sensitivity range [{lo}, {hi}]")
        if self.grid_resolution < 2:
            raise ValueError("grid resolution must be at least 2 per axis")

    def corners(self) -> list[EpsilonPoint]:
        return [
            EpsilonPoint(e1, e0)
            for e1 in self.eps1_range
            for e0 in self.eps0_range
        ]

    def grid(self) -> list[EpsilonPoint]:
        """Tensor grid (endpoints included) plus the four corners."""
        e1s = np.linspace(*self.eps1_range, self.grid_resolution)
        e0s = np.linspace(*self.eps0_range, self.grid_resolution)
        points = [EpsilonPoint(float(e1), float(e0)) for e1 in e1s for e0 in e0s]
        points.extend(self.corners())
        return points

    def contracted(self, factor: float, center: tuple[float, float] = NO_CONFOUNDING) -> "EpsilonBox":
        """Shrink both axis intervals toward ``center`` by ``factor``."""
        c1, c0 = center
        new1 = tuple(c1 + factor * (v - c1) for v in self.eps1_range)
        new0 = tuple(c0 + factor * (v - c0) for v in self.eps0_range)
        return replace(self, eps1_range=new1, eps0_range=new0)

    @property
    def degenerate(self) -> bool:
        return (
            self.eps1_range[1] - self.eps1_range[0] < 1e-12
            and self.eps0_range[1] - self.eps0_range[0] < 1e-12
        )


def _arrays(*parts):
    return tuple(np.asarray(p, dtype=float) for p in parts)


def _check_arms(a: np.ndarray) -> None:
    treated = a.sum()
    if treated == 0 or treated == a.shape[0]:
        raise EstimationError("a treatment arm is empty")


# ---------------------------------------------------------------------------
# Original estimators (the eps = (1, 1) references)
# ---------------------------------------------------------------------------


def original_or(mu1, mu0) -> float:
    mu1, mu0 = _arrays(mu1, mu0)
    return float(np.mean(mu1 - mu0))


def original_ht(y, a, e) -> float:
    y, a, e = _arrays(y, a, e)
    _check_arms(a)
    return float(np.mean(a * y / e) - np.mean((1.0 - a) * y / (1.0 - e)))


def original_hajek(y, a, e) -> float:
    return modified_hajek(y, a, e, EpsilonPoint(1.0, 1.0))


def original_aipw(y, a, mu1, mu0, e) -> float:
    y, a, mu1, mu0, e = _arrays(y, a, mu1, mu0, e)
    _check_arms(a)
    term1 = np.mean(a * y / e - (a - e) * mu1 / e)
    term0 = np.mean((1.0 - a) * y / (1.0 - e) - (e - a) * mu0 / (1.0 - e))
    return float(term1 - term0)


# ---------------------------------------------------------------------------
# Modified estimators
# ---------------------------------------------------------------------------


def modified_or(y, a, mu1, mu0, eps: EpsilonPoint) -> float:
    """Outcome-regression contrast with cross-arm imputations rescaled by eps."""
    y, a, mu1, mu0 = _arrays(y, a, mu1, mu0)
    _check_arms(a)
    term1 = np.mean(a * y + (1.0 - a) * mu1 / eps.eps1)
    term0 = np.mean(a * mu0 * eps.eps0 + (1.0 - a) * y)
    return float(term1 - term0)


def _weights(e: np.ndarray, eps: EpsilonPoint) -> tuple[np.ndarray, np.ndarray]:
    w1 = e + (1.0 - e) / eps.eps1
    w0 = e * eps.eps0 + (1.0 - e)
    return w1, w0


def modified_ht(y, a, e, eps: EpsilonPoint) -> float:
    """Horvitz-Thompson weighting with the sensitivity-adjusted weights."""
    y, a, e = _arrays(y, a, e)
    _check_arms(a)
    w1, w0 = _weights(e, eps)
    return float(np.mean(w1 * a * y / e) - np.mean(w0 * (1.0 - a) * y / (1.0 - e)))


def modified_hajek(y, a, e, eps: EpsilonPoint) -> float:
    """Arm-wise normalized version of the adjusted weighting estimator."""
    y, a, e = _arrays(y, a, e)
    _check_arms(a)
    w1, w0 = _weights(e, eps)
    den1 = float(np.sum(w1 * a / e))
    den0 = float(np.sum(w0 * (1.0 - a) / (1.0 - e)))
    if den1 <= 0.0 or den0 <= 0.0:
        raise EstimationError("zero normalizer in a treatment arm")
    num1 = float(np.sum(w1 * a * y / e))
    num0 = float(np.sum(w0 * (1.0 - a) * y / (1.0 - e)))
    return num1 / den1 - num0 / den0


def modified_dr(y, a, mu1, mu0, e, eps: EpsilonPoint) -> float:
    """Augmented weighting estimator; reduces to the original AIPW at eps=(1,1)."""
    y, a, mu1, mu0, e = _arrays(y, a, mu1, mu0, e)
    _check_arms(a)
    w1, w0 = _weights(e, eps)
    term1 = np.mean(w1 * a * y / e - (a - e) * mu1 / (e * eps.eps1))
    term0 = np.mean(w0 * (1.0 - a) * y / (1.0 - e) - (e - a) * mu0 * eps.eps0 / (1.0 - e))
    return float(term1 - term0)


# ---------------------------------------------------------------------------
# Nuisance fitting and box bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SensitivityNuisances:
    """Per-row nuisance predictions frozen before grid evaluation."""

    mu1: np.ndarray
    mu0: np.ndarray
    e: np.ndarray
    mu1_model: FittedModel | None = None
    mu0_model: FittedModel | None = None
    e_model: FittedModel | None = None


def fit_sensitivity_nuisances(y, a, x, names=None) -> SensitivityNuisances:
    """Arm-wise outcome models plus a logistic propensity, fit on the subset.

    Bounding a sub-population refits everything on that sub-population, so
    this is the single entry point for both the full-cohort and subset runs.
    """
    y, a = _arrays(y, a)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    _check_arms(a)
    cols = design_columns(names if names is not None else [f"x{j+1}" for j in range(x.shape[1])])
    design = add_intercept(x)
    treated = a == 1.0
    mu1_model = fit_ols(design[treated], y[treated], cols)
    mu0_model = fit_ols(design[~treated], y[~treated], cols)
    e_model = fit_logistic(design, a, cols)
    return SensitivityNuisances(
        mu1=predict(mu1_model, design),
        mu0=predict(mu0_model, design),
        e=predict(e_model, design),
        mu1_model=mu1_model,
        mu0_model=mu0_model,
        e_model=e_model,
    )


def evaluate_estimator(estimator: str, y, a, nuis: SensitivityNuisances, eps: EpsilonPoint) -> float:
    if estimator == "or":
        return modified_or(y, a, nuis.mu1, nuis.mu0, eps)
    if estimator == "ht":
        return modified_ht(y, a, nuis.e, eps)
    if estimator == "hajek":
        return modified_hajek(y, a, nuis.e, eps)
    if estimator == "dr":
        return modified_dr(y, a, nuis.mu1, nuis.mu0, nuis.e, eps)
    raise ValueError(f"unknown sensitivity estimator {estimator!r}")


def bounds_over_box(y, a, nuis: SensitivityNuisances, box: EpsilonBox, estimator: str) -> BoundResult:
    """Min/max of the selected estimator over the box grid plus corners."""
    values = [evaluate_estimator(estimator, y, a, nuis, p) for p in box.grid()]
    return BoundResult(lower=min(values), upper=max(values))
