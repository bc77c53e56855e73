"""Trial-generalization estimators for the trial-eligible cohort effect.

Three estimators transport the randomized-trial contrast to the eligible
observational population: an outcome-model estimator (OM), inverse
probability of sampling weighting (IPSW), and its augmented version (AIPSW).
The sampling odds are fit by logistic regression of trial membership on the
stacked trial + eligible-observational rows; the trial propensity defaults to
the known randomization constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .regress import (
    EstimationError,
    FittedModel,
    PROB_CLAMP,
    add_intercept,
    design_columns,
    fit_logistic,
    fit_ols,
    predict,
)

GEN_METHODS = ("om", "ipsw", "aipsw")


@dataclass(frozen=True)
class GeneralizationConfig:
    """Method choice plus nuisance options.

    ``propensity`` is either the known randomization constant or the string
    ``"fit"`` to estimate it on the trial rows. ``trim`` optionally clamps
    both the trial propensity and the sampling probability into [lo, hi];
    the default leaves only the numerical clamp, which deliberately preserves
    the instability of weighting with extreme sampling odds.
    """

    method: str = "aipsw"
    propensity: float | str = 0.5
    trim: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.method not in GEN_METHODS:
            raise ValueError(f"unknown generalization method {self.method!r}")
        if isinstance(self.propensity, str):
            if self.propensity != "fit":
                raise ValueError("propensity must be a constant in (0,1) or 'fit'")
        elif not (0.0 < float(self.propensity) < 1.0):
            raise ValueError("known propensity constant must lie in (0, 1)")


def _clamp(p: np.ndarray, trim: tuple[float, float] | None) -> np.ndarray:
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if trim is not None:
        p = np.clip(p, trim[0], trim[1])
    return p


def fit_sampling_odds(rct_x, elig_x, names=None, trim=None) -> tuple[FittedModel, np.ndarray]:
    """Logistic membership model on the stacked rows; returns odds at trial rows.

    Odds are p/(1-p) with the fitted probability clamped, so they stay
    strictly positive and finite even under separation (which is reported via
    the model's converged flag, not raised).
    """
    rct_x = np.asarray(rct_x, dtype=float)
    elig_x = np.asarray(elig_x, dtype=float)
    if elig_x.shape[0] == 0:
        raise EstimationError("no trial-eligible observational rows to stack against")
    if rct_x.shape[0] == 0:
        raise EstimationError("trial sample is empty")
    cols = design_columns(names if names is not None else [f"x{j+1}" for j in range(rct_x.shape[1])])
    stack = add_intercept(np.vstack([rct_x, elig_x]))
    member = np.concatenate([np.ones(rct_x.shape[0]), np.zeros(elig_x.shape[0])])
    model = fit_logistic(stack, member, cols)
    p = _clamp(predict(model, add_intercept(rct_x)), trim)
    return model, p / (1.0 - p)


def _rct_propensity(rct_a, rct_x, config: GeneralizationConfig, names) -> np.ndarray:
    if config.propensity == "fit":
        design = add_intercept(rct_x)
        model = fit_logistic(design, rct_a, design_columns(names))
        return _clamp(predict(model, design), config.trim)
    return np.full(rct_a.shape[0], float(config.propensity))


def _outcome_models(rct_y, rct_a, rct_x, names) -> tuple[FittedModel, FittedModel]:
    treated = rct_a == 1.0
    if not treated.any() or treated.all():
        raise EstimationError("a trial treatment arm is empty")
    design = add_intercept(rct_x)
    cols = design_columns(names)
    return fit_ols(design[treated], rct_y[treated], cols), fit_ols(design[~treated], rct_y[~treated], cols)


def om_estimator(mu1_elig, mu0_elig) -> float:
    """Mean predicted individual effect over the eligible observational rows."""
    mu1_elig = np.asarray(mu1_elig, dtype=float)
    if mu1_elig.shape[0] == 0:
        raise EstimationError("no eligible rows to average over")
    return float(np.mean(mu1_elig - np.asarray(mu0_elig, dtype=float)))


def ipsw_estimator(rct_y, rct_a, alpha, e, n0: int) -> float:
    """Inverse-probability-of-sampling weighted trial contrast."""
    if n0 < 1:
        raise EstimationError("eligible observational count is zero")
    rct_y, rct_a, alpha, e = (np.asarray(v, dtype=float) for v in (rct_y, rct_a, alpha, e))
    core = (rct_y / alpha) * (rct_a / e - (1.0 - rct_a) / (1.0 - e))
    return float(core.sum() / n0)


def aipsw_estimator(rct_y, rct_a, alpha, e, mu1_rct, mu0_rct, om_term: float, n0: int) -> float:
    """Residual-reweighted trial term plus the outcome-model term."""
    if n0 < 1:
        raise EstimationError("eligible observational count is zero")
    rct_y, rct_a, alpha, e, mu1_rct, mu0_rct = (
        np.asarray(v, dtype=float) for v in (rct_y, rct_a, alpha, e, mu1_rct, mu0_rct)
    )
    core = (1.0 / alpha) * (
        rct_a * (rct_y - mu1_rct) / e - (1.0 - rct_a) * (rct_y - mu0_rct) / (1.0 - e)
    )
    return float(core.sum() / n0) + om_term


@dataclass(frozen=True)
class GeneralizationFit:
    estimates: dict
    alpha_model: FittedModel | None
    mu1_model: FittedModel | None
    mu0_model: FittedModel | None

    def psi(self, method: str) -> float:
        return self.estimates[method]


def estimate_all(rct_y, rct_a, rct_x, elig_x, names=None,
                 config: GeneralizationConfig | None = None) -> GeneralizationFit:
    """Fit shared nuisances once and evaluate every generalization estimator."""
    config = config or GeneralizationConfig()
    rct_y = np.asarray(rct_y, dtype=float)
    rct_a = np.asarray(rct_a, dtype=float)
    rct_x = np.asarray(rct_x, dtype=float)
    elig_x = np.asarray(elig_x, dtype=float)
    names = tuple(names) if names is not None else tuple(f"x{j+1}" for j in range(rct_x.shape[1]))
    n0 = elig_x.shape[0]

    mu1_model, mu0_model = _outcome_models(rct_y, rct_a, rct_x, names)
    elig_design = add_intercept(elig_x)
    om = om_estimator(predict(mu1_model, elig_design), predict(mu0_model, elig_design))

    alpha_model, alpha = fit_sampling_odds(rct_x, elig_x, names, config.trim)
    e = _rct_propensity(rct_a, rct_x, config, names)
    rct_design = add_intercept(rct_x)
    mu1_rct = predict(mu1_model, rct_design)
    mu0_rct = predict(mu0_model, rct_design)

    estimates = {
        "om": om,
        "ipsw": ipsw_estimator(rct_y, rct_a, alpha, e, n0),
        "aipsw": aipsw_estimator(rct_y, rct_a, alpha, e, mu1_rct, mu0_rct, om, n0),
    }
    return GeneralizationFit(estimates, alpha_model, mu1_model, mu0_model)


def estimate(rct_y, rct_a, rct_x, elig_x, names=None,
             config: GeneralizationConfig | None = None) -> float:
    config = config or GeneralizationConfig()
    return estimate_all(rct_y, rct_a, rct_x, elig_x, names, config).psi(config.method)
