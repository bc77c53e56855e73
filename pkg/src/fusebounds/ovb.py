"""Partial-R2 (omitted-variable-bias) sensitivity framework.

The sensitivity coordinate is the pair (R2 of treatment with the unmeasured
confounder given X, R2 of outcome with it given treatment and X). For a
linear outcome model the worst-case bias over the box [0, a] x [0, b] is
available in closed form, so bounds need no grid:

    |bias| = se(psi_res) * sqrt(r2_y * r2_a / (1 - r2_a) * df)

with ``se(psi_res)`` and ``df`` taken from the short (confounder-omitting)
regression. ``benchmark_strengths`` caps the coordinate by a multiple of an
observed covariate's measured strength, and ``transform_r2`` maps
sub-population coordinates to the pooled one through the law-of-total-variance
decomposition, whose variance-gap weights and nuisance terms live in
:class:`TransformComponents`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .bounds import BoundResult
from .dataset import FusedDataset, ValidationError
from .regress import (
    EstimationError,
    FittedModel,
    add_intercept,
    design_columns,
    fit_logistic,
    fit_ols,
    partial_r2_nested,
)

A_CAP = 1.0 - 1e-9
Y_CAP = 1.0


@dataclass(frozen=True)
class R2Point:
    """Sensitivity coordinate; ``r2_a`` must stay below 1 (its denominator is 1 - r2_a)."""

    r2_a: float
    r2_y: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.r2_a < 1.0):
            raise ValueError("treatment-side R^2 must lie in [0, 1)")
        if not (0.0 <= self.r2_y <= 1.0):
            raise ValueError("outcome-side R^2 must lie in [0, 1]")


@dataclass(frozen=True)
class R2Box:
    """Rectangle [0, a_max] x [0, y_max] in the sensitivity square."""

    a_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.a_max < 1.0):
            raise ValueError("a_max must lie in [0, 1)")
        if not (0.0 <= self.y_max <= 1.0):
            raise ValueError("y_max must lie in [0, 1]")

    @property
    def corner(self) -> R2Point:
        return R2Point(self.a_max, self.y_max)

    def contracted(self, factor: float) -> "R2Box":
        return replace(self, a_max=factor * self.a_max, y_max=factor * self.y_max)

    @property
    def degenerate(self) -> bool:
        return self.a_max < 1e-12 and self.y_max < 1e-12


def f2(r2: float) -> float:
    """Cohen-style effect transform R^2 / (1 - R^2)."""
    if r2 >= 1.0:
        raise EstimationError("R^2 of 1 or above has no finite effect transform")
    if r2 < 0.0:
        raise EstimationError("R^2 must be nonnegative")
    return r2 / (1.0 - r2)


def bias_abs(point: R2Point, se_res: float, df: int) -> float:
    """Absolute confounding bias of the short-regression ATE at one coordinate.

    Exact finite-sample identity: with both R2 values measured as sample
    partial R2s from the long/short fits, this equals |psi_short - psi_long|.
    """
    if se_res <= 0.0:
        raise EstimationError("standard error must be positive")
    if df < 1:
        raise EstimationError("need at least one residual degree of freedom")
    return se_res * float(np.sqrt(point.r2_y * point.r2_a / (1.0 - point.r2_a) * df))


def short_regression(y, a, x, names=None) -> FittedModel:
    """OLS of outcome on intercept, treatment and covariates ('short' = no confounder)."""
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    cov_names = tuple(names) if names is not None else tuple(f"x{j+1}" for j in range(x.shape[1]))
    design = np.column_stack([np.ones(y.shape[0]), a, x])
    return fit_ols(design, y, ("intercept", "a") + cov_names)


def adjusted_bounds(short_fit: FittedModel, box: R2Box, treatment: str = "a") -> BoundResult:
    """Symmetric interval psi_res +/- |bias| at the box corner; width = 2|bias|."""
    psi_res = short_fit.coef(treatment)
    if box.a_max == 0.0 or box.y_max == 0.0:
        return BoundResult(psi_res, psi_res)
    b = bias_abs(box.corner, short_fit.se(treatment), short_fit.df)
    return BoundResult(psi_res - b, psi_res + b)


def benchmark_strengths(y, a, x, names, benchmark: str, k_a: float = 1.0, k_y: float = 1.0) -> R2Box:
    """Cap the confounder's strength by k times an observed covariate's strength.

    The treatment-side cap is k_a * f2 of the benchmark's partial R2 in the
    linear treatment regression on the other covariates; the outcome-side cap
    is k_y * f2 of its partial R2 in the outcome regression given treatment
    and the other covariates. Results are clipped into the legal square
    (a below 1, b at 1) since k-scaling can escape it.
    """
    if k_a <= 0.0 or k_y <= 0.0:
        raise EstimationError("benchmark multipliers must be positive")
    names = tuple(names)
    if benchmark not in names:
        raise ValidationError(f"benchmark covariate {benchmark!r} not in schema")
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    j = names.index(benchmark)
    others = [k for k in range(len(names)) if k != j]
    other_names = tuple(names[k] for k in others)

    design_a_full = add_intercept(x)
    design_a_red = add_intercept(x[:, others])
    fit_a_full = fit_ols(design_a_full, a, design_columns(names))
    fit_a_red = fit_ols(design_a_red, a, design_columns(other_names))
    r2_a_bench = partial_r2_nested(fit_a_full, fit_a_red)

    design_y_full = np.column_stack([np.ones(y.shape[0]), a, x])
    design_y_red = np.column_stack([np.ones(y.shape[0]), a, x[:, others]])
    fit_y_full = fit_ols(design_y_full, y, ("intercept", "a") + names)
    fit_y_red = fit_ols(design_y_red, y, ("intercept", "a") + other_names)
    r2_y_bench = partial_r2_nested(fit_y_full, fit_y_red)

    a_max = min(k_a * f2(min(r2_a_bench, A_CAP)), A_CAP)
    y_max = min(k_y * f2(min(r2_y_bench, A_CAP)), Y_CAP)
    return R2Box(a_max=a_max, y_max=y_max)


@dataclass(frozen=True)
class Table3Report:
    """Benchmark-driven comparison of the two bound widths."""

    w1: float
    w2: float
    ratio: float
    recommendation: str  # "synthesis" | "fallback"
    os_box: R2Box
    sub_box: R2Box | None

    def to_json(self) -> dict:
        return {
            "W1": self.w1,
            "W2": self.w2,
            "ratio": self.ratio,
            "recommendation": self.recommendation,
            "os_box": {"a_max": self.os_box.a_max, "y_max": self.os_box.y_max},
            "sub_box": None
            if self.sub_box is None
            else {"a_max": self.sub_box.a_max, "y_max": self.sub_box.y_max},
        }


def table3_procedure(data: FusedDataset, benchmark: str, k_a: float = 1.0, k_y: float = 1.0) -> Table3Report:
    """Compare the full-cohort width W1 with the synthesis width W2.

    W1 = 2|bias| on the entire observational sample; W2 = 2 * p1 * |bias| on
    the trial-ineligible subset with its own benchmark strengths. Ratio at or
    below one recommends the synthesis route.
    """
    os_pop = data.os
    os_box = benchmark_strengths(os_pop.y, os_pop.a, os_pop.x, data.schema, benchmark, k_a, k_y)
    os_fit = short_regression(os_pop.y, os_pop.a, os_pop.x, data.schema)
    w1 = 2.0 * bias_abs(os_box.corner, os_fit.se("a"), os_fit.df)

    if data.n1 == 0:
        return Table3Report(w1=w1, w2=0.0, ratio=0.0, recommendation="synthesis",
                            os_box=os_box, sub_box=None)
    sub = data.os_subset(1)
    if sub.size < len(data.schema) + 3:
        raise EstimationError("trial-ineligible subset is too small for the benchmark fits")
    sub_box = benchmark_strengths(sub.y, sub.a, sub.x, data.schema, benchmark, k_a, k_y)
    sub_fit = short_regression(sub.y, sub.a, sub.x, data.schema)
    w2 = 2.0 * data.p1 * bias_abs(sub_box.corner, sub_fit.se("a"), sub_fit.df)
    ratio = w2 / w1
    recommendation = "synthesis" if ratio <= 1.0 else "fallback"
    return Table3Report(w1=w1, w2=w2, ratio=ratio, recommendation=recommendation,
                        os_box=os_box, sub_box=sub_box)


# ---------------------------------------------------------------------------
# Sub-population -> pooled transformation of the sensitivity coordinates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformComponents:
    """Inputs of the pooled-coordinate formula.

    ``delta_y_j``/``delta_a_j`` follow the cross-indexed convention: the gap
    with index j is the variance gap measured on the stratum with v_star equal
    to 1 - j. ``theta_*`` are the nuisance numerator gaps and ``denom_*`` the
    matching denominator gaps; both vanish identically when the conditional
    means preserve stratum means (iterated expectations), which is why their
    default is 0.
    """

    p0: float
    p1: float
    r2_y_0: float
    r2_y_1: float
    r2_a_0: float
    r2_a_1: float
    delta_y_0: float
    delta_y_1: float
    delta_a_0: float
    delta_a_1: float
    theta_y: float = 0.0
    theta_a: float = 0.0
    denom_y: float = 0.0
    denom_a: float = 0.0

    def __post_init__(self) -> None:
        if abs(self.p0 + self.p1 - 1.0) > 1e-9 or self.p0 < 0.0 or self.p1 < 0.0:
            raise ValueError("stratum proportions must be nonnegative and sum to one")


def _pool(p0, p1, r0, r1, d0, d1, theta, denom) -> float:
    if min(d0, d1) <= 0.0:
        raise EstimationError("degenerate variance gap in the pooled-coordinate transform")
    num = p0 * r0 / d0 + p1 * r1 / d1 + theta / (d0 * d1)
    den = p0 / d0 + p1 / d1 + denom / (d0 * d1)
    if den <= 0.0:
        raise EstimationError("zero denominator in the pooled-coordinate transform")
    return num / den


def transform_r2(components: TransformComponents) -> R2Point:
    """Pooled sensitivity coordinate from the sub-population ones.

    Degenerate mixtures shortcut to the surviving stratum's coordinate, which
    is also the transform's limit as that stratum proportion tends to one.
    """
    c = components
    if c.p0 == 1.0:
        return R2Point(c.r2_a_0, c.r2_y_0)
    if c.p1 == 1.0:
        return R2Point(c.r2_a_1, c.r2_y_1)
    r2_y = _pool(c.p0, c.p1, c.r2_y_0, c.r2_y_1, c.delta_y_0, c.delta_y_1, c.theta_y, c.denom_y)
    r2_a = _pool(c.p0, c.p1, c.r2_a_0, c.r2_a_1, c.delta_a_0, c.delta_a_1, c.theta_a, c.denom_a)
    return R2Point(min(max(r2_a, 0.0), A_CAP), min(max(r2_y, 0.0), Y_CAP))


def _pop_var(v: np.ndarray) -> float:
    return float(np.var(v))


def _between_var(values: np.ndarray, strata: np.ndarray) -> float:
    """Variance of the stratum-mean projection (population weighting)."""
    total = float(np.mean(values))
    out = 0.0
    for j in (0, 1):
        mask = strata == j
        if mask.any():
            out += mask.mean() * (float(values[mask].mean()) - total) ** 2
    return out


def estimate_transform_components(
    y,
    a,
    x,
    u,
    v_star,
    *,
    mean_y_long: Callable | None = None,
    mean_y_short: Callable | None = None,
    mean_a_long: Callable | None = None,
    mean_a_short: Callable | None = None,
) -> TransformComponents:
    """Empirical transform components from data with the confounder observed.

    With no conditional-mean callables supplied, the four models are fit
    within each stratum (OLS for the outcome means, logistic for the
    treatment means). Supplying exact functions instead makes the
    law-of-total-variance identity hold to float precision:
    ``transform_r2`` of these components equals the pooled partial R2
    computed directly from the same functions.

    Callable signatures: ``mean_y_long(u, a, x)``, ``mean_y_short(a, x)``,
    ``mean_a_long(u, x)``, ``mean_a_short(x)``, each returning one value per row.
    """
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    u = np.asarray(u, dtype=float)
    v = np.asarray(v_star, dtype=int)
    if u.shape[0] != y.shape[0]:
        raise EstimationError("confounder column missing or mismatched")

    n = y.shape[0]
    p1 = float((v == 1).mean())
    p0 = 1.0 - p1

    oracle = mean_y_long is not None
    if oracle:
        m_y_long = np.asarray(mean_y_long(u, a, x), dtype=float)
        m_y_short = np.asarray(mean_y_short(a, x), dtype=float)
        m_a_long = np.asarray(mean_a_long(u, x), dtype=float)
        m_a_short = np.asarray(mean_a_short(x), dtype=float)
    else:
        m_y_long = np.empty(n)
        m_y_short = np.empty(n)
        m_a_long = np.empty(n)
        m_a_short = np.empty(n)
        for j in (0, 1):
            mask = v == j
            if not mask.any():
                continue
            yj, aj, xj, uj = y[mask], a[mask], x[mask], u[mask]
            d_long = np.column_stack([np.ones(yj.shape[0]), aj, xj, uj])
            d_short = np.column_stack([np.ones(yj.shape[0]), aj, xj])
            m_y_long[mask] = fit_ols(d_long, yj).fitted_values
            m_y_short[mask] = fit_ols(d_short, yj).fitted_values
            da_long = np.column_stack([np.ones(yj.shape[0]), xj, uj])
            da_short = np.column_stack([np.ones(yj.shape[0]), xj])
            m_a_long[mask] = fit_logistic(da_long, aj).fitted_values
            m_a_short[mask] = fit_logistic(da_short, aj).fitted_values

    def stratum_r2(target, m_long, m_short, j):
        mask = v == j
        gap = _pop_var(target[mask]) - _pop_var(m_short[mask])
        if gap <= 0.0:
            raise EstimationError(f"degenerate variance gap in stratum {j}")
        return (_pop_var(m_long[mask]) - _pop_var(m_short[mask])) / gap

    def cross_gap(target, m_short, j):
        mask = v == (1 - j)
        if not mask.any():
            return float("nan")
        return _pop_var(target[mask]) - _pop_var(m_short[mask])

    if p1 == 0.0 or p0 == 0.0:
        j = 0 if p1 == 0.0 else 1
        r2_y = stratum_r2(y, m_y_long, m_y_short, j)
        r2_a = stratum_r2(a, m_a_long, m_a_short, j)
        kwargs = dict.fromkeys(
            ("delta_y_0", "delta_y_1", "delta_a_0", "delta_a_1"), float("nan")
        )
        return TransformComponents(
            p0=p0, p1=p1,
            r2_y_0=r2_y if j == 0 else 0.0, r2_y_1=r2_y if j == 1 else 0.0,
            r2_a_0=r2_a if j == 0 else 0.0, r2_a_1=r2_a if j == 1 else 0.0,
            **kwargs,
        )

    return TransformComponents(
        p0=p0,
        p1=p1,
        r2_y_0=stratum_r2(y, m_y_long, m_y_short, 0),
        r2_y_1=stratum_r2(y, m_y_long, m_y_short, 1),
        r2_a_0=stratum_r2(a, m_a_long, m_a_short, 0),
        r2_a_1=stratum_r2(a, m_a_long, m_a_short, 1),
        delta_y_0=cross_gap(y, m_y_short, 0),
        delta_y_1=cross_gap(y, m_y_short, 1),
        delta_a_0=cross_gap(a, m_a_short, 0),
        delta_a_1=cross_gap(a, m_a_short, 1),
        theta_y=_between_var(m_y_long, v) - _between_var(m_y_short, v),
        theta_a=_between_var(m_a_long, v) - _between_var(m_a_short, v),
        denom_y=_between_var(y, v) - _between_var(m_y_short, v),
        denom_a=_between_var(a, v) - _between_var(m_a_short, v),
    )


def pooled_partial_r2(target, m_long, m_short) -> float:
    """Direct pooled partial R2 from fixed conditional-mean columns."""
    target = np.asarray(target, dtype=float)
    m_long = np.asarray(m_long, dtype=float)
    m_short = np.asarray(m_short, dtype=float)
    gap = _pop_var(target) - _pop_var(m_short)
    if gap <= 0.0:
        raise EstimationError("degenerate pooled variance gap")
    return (_pop_var(m_long) - _pop_var(m_short)) / gap


def pooled_box_from_sub_boxes(
    sub_box_0: R2Box, sub_box_1: R2Box, components: TransformComponents
) -> R2Box:
    """Map the two sub-population boxes' corners through the transform."""
    corner_components = replace(
        components,
        r2_a_0=sub_box_0.a_max, r2_a_1=sub_box_1.a_max,
        r2_y_0=sub_box_0.y_max, r2_y_1=sub_box_1.y_max,
    )
    point = transform_r2(corner_components)
    return R2Box(a_max=point.r2_a, y_max=point.r2_y)
