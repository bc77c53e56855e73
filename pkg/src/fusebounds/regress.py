"""Self-contained regression engine for every nuisance quantity in the package.

OLS fits supply outcome models, standard errors and R-squared values; IRLS
logistic fits supply propensity and sampling models. Partial R-squared is
always computed from nested-fit comparisons so a single code path serves the
confounding-bias formula, benchmark bounding and the variance-decomposition
components.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

PROB_CLAMP = 1e-6
RANK_TOL = 1e-10
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
IRLS_RIDGE = 1e-8


class EstimationError(RuntimeError):
    """Numerical failure while fitting a model or evaluating an estimator."""


class RankDeficientError(EstimationError):
    def __init__(self, column: str):
        super().__init__(f"design matrix is rank deficient at column {column!r}")
        self.column = column


@dataclass(frozen=True)
class FittedModel:
    """Frozen regression fit.

    ``coefficients`` are ordered like ``columns`` (intercept first by
    convention of the helpers below). ``df`` is the residual degrees of
    freedom ``n_obs - len(columns)``. For logistic fits ``residual_variance``
    and ``r_squared`` are not meaningful and stay at 0; for OLS fits
    ``deviance`` stays at 0.
    """

    kind: str  # "ols" | "logistic"
    columns: tuple[str, ...]
    coefficients: np.ndarray
    fitted_values: np.ndarray
    coef_se: np.ndarray
    df: int
    n_obs: int
    residual_variance: float = 0.0
    r_squared: float = 0.0
    converged: bool = True
    deviance: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.columns.index(name)])

    def se(self, name: str) -> float:
        return float(self.coef_se[self.columns.index(name)])


def add_intercept(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.column_stack([np.ones(x.shape[0]), x])


def design_columns(names) -> tuple[str, ...]:
    return ("intercept",) + tuple(names)


def _prepare(x, y, columns):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.shape[0] != x.shape[0]:
        raise EstimationError("response length does not match design rows")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise EstimationError("non-finite value in design or response")
    if columns is None:
        columns = tuple(f"x{j}" for j in range(x.shape[1]))
    else:
        columns = tuple(columns)
        if len(columns) != x.shape[1]:
            raise EstimationError("column names do not match design width")
    return x, y, columns


def _offending_column(x: np.ndarray, columns: tuple[str, ...]) -> str:
    scale = np.abs(x).max() if x.size else 1.0
    tol = RANK_TOL * max(scale, 1.0)
    for j in range(1, x.shape[1] + 1):
        if np.linalg.matrix_rank(x[:, :j], tol=tol) < j:
            return columns[j - 1]
    return columns[-1]


def fit_ols(x, y, columns=None) -> FittedModel:
    """Least-squares fit via QR, with SEs from the inverse Gram diagonal.

    R-squared is measured against the intercept-only model; callers are
    expected to include an intercept column.
    """
    x, y, columns = _prepare(x, y, columns)
    n, k = x.shape
    if n < k + 1:
        raise EstimationError(f"need at least {k + 1} rows to fit {k} coefficients, got {n}")
    q, r = np.linalg.qr(x)
    diag = np.abs(np.diag(r))
    if diag.min() <= RANK_TOL * max(diag.max(), 1.0):
        raise RankDeficientError(_offending_column(x, columns))
    beta = np.linalg.solve(r, q.T @ y)
    fitted = x @ beta
    resid = y - fitted
    rss = float(resid @ resid)
    df = n - k
    sigma2 = max(rss / df, 0.0)
    rinv = np.linalg.inv(r)
    gram_inv_diag = np.einsum("ij,ij->i", rinv, rinv)
    se = np.sqrt(np.clip(sigma2 * gram_inv_diag, 0.0, None))
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - rss / tss if tss > 0.0 else 0.0
    r2 = min(max(r2, 0.0), 1.0)
    return FittedModel(
        kind="ols",
        columns=columns,
        coefficients=beta,
        fitted_values=fitted,
        coef_se=se,
        df=df,
        n_obs=n,
        residual_variance=sigma2,
        r_squared=r2,
    )


def _logistic_deviance(x, y, beta):
    p = np.clip(expit(x @ beta), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -2.0 * float(y @ np.log(p) + (1.0 - y) @ np.log1p(-p))


def fit_logistic(x, y, columns=None) -> FittedModel:
    """Maximum-likelihood logistic fit by iteratively reweighted least squares.

    Convergence is declared when the deviance changes by less than ``IRLS_TOL``
    within 100 iterations. A singular weighted Gram matrix gets a 1e-8 ridge
    (recorded in diagnostics) and the iteration continues; separated data is
    reported with ``converged=False`` rather than an exception, with fitted
    probabilities clamped to ``[1e-6, 1 - 1e-6]``.
    """
    x, y, columns = _prepare(x, y, columns)
    n, k = x.shape
    uniq = np.unique(y)
    if not np.all(np.isin(uniq, (0.0, 1.0))):
        raise EstimationError("logistic response must be binary (0/1)")
    if uniq.size < 2:
        raise EstimationError("logistic response takes a single value")
    if n < k + 1:
        raise EstimationError(f"need at least {k + 1} rows to fit {k} coefficients, got {n}")

    beta = np.zeros(k)
    dev = _logistic_deviance(x, y, beta)
    ridge_events = 0
    converged = False
    iterations = 0
    hess = np.eye(k)
    for iterations in range(1, IRLS_MAX_ITER + 1):
        p = np.clip(expit(x @ beta), PROB_CLAMP, 1.0 - PROB_CLAMP)
        w = p * (1.0 - p)
        score = x.T @ (y - p)
        hess = (x * w[:, None]).T @ x
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            ridge_events += 1
            hess = hess + IRLS_RIDGE * np.eye(k)
            step = np.linalg.solve(hess, score)
        new_beta = beta + step
        new_dev = _logistic_deviance(x, y, new_beta)
        halvings = 0
        while new_dev > dev + 1e-10 and halvings < 10:
            step = step / 2.0
            new_beta = beta + step
            new_dev = _logistic_deviance(x, y, new_beta)
            halvings += 1
        beta = new_beta
        if abs(dev - new_dev) < IRLS_TOL:
            dev = new_dev
            converged = True
            break
        dev = new_dev

    eta = x @ beta
    fitted = np.clip(expit(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)
    # Complete separation: every treated linear predictor above every control
    # one. The deviance plateaus at its clamp floor, so flag it explicitly.
    separated = bool(eta[y == 1].min() > eta[y == 0].max()) if converged else False
    if separated:
        converged = False
    try:
        cov = np.linalg.inv(hess)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.full(k, np.nan)
    return FittedModel(
        kind="logistic",
        columns=columns,
        coefficients=beta,
        fitted_values=fitted,
        coef_se=se,
        df=n - k,
        n_obs=n,
        converged=converged,
        deviance=dev,
        diagnostics={"iterations": iterations, "ridge": ridge_events, "separated": separated},
    )


def predict(model: FittedModel, x) -> np.ndarray:
    """Linear predictor for OLS; clamped inverse-logit for logistic fits."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != len(model.columns):
        raise EstimationError(
            f"design has {x.shape[1]} columns, model expects {len(model.columns)}"
        )
    eta = x @ model.coefficients
    if model.kind == "logistic":
        return np.clip(expit(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return eta


def partial_r2_nested(full: FittedModel, reduced: FittedModel) -> float:
    """Partial R-squared of the columns present in ``full`` but not ``reduced``.

    Computed as (R2_full - R2_reduced) / (1 - R2_reduced). Both fits must be
    OLS on identical rows with the reduced design a column subset of the full
    one. Tiny negative values (float noise) clamp to 0; the result is capped
    just below 1.
    """
    if full.kind != "ols" or reduced.kind != "ols":
        raise EstimationError("partial R^2 requires two OLS fits")
    if full.n_obs != reduced.n_obs:
        raise EstimationError("nested fits must use identical rows")
    if not set(reduced.columns) <= set(full.columns):
        raise EstimationError("reduced design is not a column subset of the full design")
    if reduced.r_squared >= 1.0 - 1e-12:
        return 0.0
    value = (full.r_squared - reduced.r_squared) / (1.0 - reduced.r_squared)
    if value < -1e-12:
        raise EstimationError("negative partial R^2 beyond float noise; designs are not nested")
    return min(max(value, 0.0), 1.0 - 1e-12)


def residualize(target, x, columns=None) -> np.ndarray:
    """OLS residuals of ``target`` on ``x`` (full-rank design required)."""
    fit = fit_ols(x, target, columns)
    return np.asarray(target, dtype=float) - fit.fitted_values
