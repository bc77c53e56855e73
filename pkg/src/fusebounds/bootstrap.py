"""Stratified nonparametric bootstrap for bound endpoints and scalar estimates.

Resampling happens independently within the three design strata (trial,
eligible observational, ineligible observational) so every replicate keeps
the sample sizes n, N0, N1 and hence the overlap proportion fixed. Replicate
seeds derive deterministically from the master seed and replicate index, so
identical inputs reproduce identical output bit for bit within one
implementation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Mapping

import numpy as np

from .bounds import BoundResult
from .dataset import FusedDataset
from .regress import EstimationError


@dataclass(frozen=True)
class BootstrapConfig:
    replicates: int = 200
    seed: int = 0
    ci_level: float = 0.95

    def __post_init__(self) -> None:
        if self.replicates < 2:
            raise ValueError("need at least two bootstrap replicates")
        if not (0.0 < self.ci_level < 1.0):
            raise ValueError("ci_level must lie in (0, 1)")

    def replicate_rngs(self) -> list[np.random.Generator]:
        children = np.random.SeedSequence(self.seed).spawn(self.replicates)
        return [np.random.default_rng(c) for c in children]


def resample(data: FusedDataset, rng: np.random.Generator) -> FusedDataset:
    """Resample with replacement within each stratum, preserving (n, N0, N1)."""
    rct_idx = rng.integers(0, data.n, data.n)
    os_v = data.os_v_star.astype(int)
    elig = np.flatnonzero(os_v == 0)
    inel = np.flatnonzero(os_v == 1)
    parts = []
    if elig.size:
        parts.append(elig[rng.integers(0, elig.size, elig.size)])
    if inel.size:
        parts.append(inel[rng.integers(0, inel.size, inel.size)])
    os_idx = np.concatenate(parts)
    return FusedDataset(
        schema=data.schema,
        rct_y=data.rct_y[rct_idx],
        rct_a=data.rct_a[rct_idx],
        rct_x=data.rct_x[rct_idx],
        os_y=data.os_y[os_idx],
        os_a=data.os_a[os_idx],
        os_x=data.os_x[os_idx],
        os_v_star=data.os_v_star[os_idx],
        criteria=data.criteria,
    )


def _percentile_pair(values: np.ndarray, level: float) -> tuple[float, float]:
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return float(lo), float(hi)


@dataclass(frozen=True)
class BootstrapOutcome:
    bound: BoundResult
    failures: int
    replicates_used: int


def bootstrap_bounds(
    data: FusedDataset,
    analysis: Callable[[FusedDataset], BoundResult],
    config: BootstrapConfig,
) -> BootstrapOutcome:
    """Point estimates from the original data; SDs and percentile CIs from replicates.

    Replicates where the analysis fails numerically are dropped and counted;
    more than half failing aborts with diagnostics.
    """
    base = analysis(data)
    lows, highs = [], []
    failures = 0
    for rng in config.replicate_rngs():
        try:
            b = analysis(resample(data, rng))
        except (EstimationError, np.linalg.LinAlgError):
            failures += 1
            continue
        lows.append(b.lower)
        highs.append(b.upper)
    if failures > config.replicates // 2:
        raise EstimationError(
            f"bootstrap failed in {failures}/{config.replicates} replicates"
        )
    lows_arr = np.asarray(lows)
    highs_arr = np.asarray(highs)
    filled = replace(
        base,
        sd_lower=float(np.std(lows_arr, ddof=1)),
        sd_upper=float(np.std(highs_arr, ddof=1)),
        ci_lower=_percentile_pair(lows_arr, config.ci_level),
        ci_upper=_percentile_pair(highs_arr, config.ci_level),
    )
    return BootstrapOutcome(bound=filled, failures=failures, replicates_used=len(lows))


@dataclass(frozen=True)
class TableBootstrap:
    bounds: dict
    failures: dict
    scalars: dict


def bootstrap_table(
    data: FusedDataset,
    analysis: Callable[[FusedDataset], Mapping],
    config: BootstrapConfig,
) -> TableBootstrap:
    """One resampling pass shared by many statistics.

    ``analysis`` maps a dataset to {key: (lower, upper)} for interval
    statistics and/or {key: float} for scalars; keys missing from a
    replicate's output (or lost to an exception) count as per-key failures.
    Returns filled BoundResults for interval keys and (sd, ci) pairs for
    scalar keys.
    """
    base = dict(analysis(data))
    samples: dict = {k: [] for k in base}
    failures = dict.fromkeys(base, 0)
    for rng in config.replicate_rngs():
        try:
            rep = analysis(resample(data, rng))
        except (EstimationError, np.linalg.LinAlgError):
            rep = {}
        for key in base:
            if key in rep:
                samples[key].append(rep[key])
            else:
                failures[key] += 1

    bounds: dict = {}
    scalars: dict = {}
    for key, value in base.items():
        draws = samples[key]
        if len(draws) < 2:
            if np.ndim(value) == 0:
                scalars[key] = (float(value), None, None)
            else:
                bounds[key] = BoundResult(float(value[0]), float(value[1]))
            continue
        arr = np.asarray(draws, dtype=float)
        if arr.ndim == 1:
            scalars[key] = (
                float(value),
                float(np.std(arr, ddof=1)),
                _percentile_pair(arr, config.ci_level),
            )
        else:
            bounds[key] = BoundResult(
                lower=float(value[0]),
                upper=float(value[1]),
                sd_lower=float(np.std(arr[:, 0], ddof=1)),
                sd_upper=float(np.std(arr[:, 1], ddof=1)),
                ci_lower=_percentile_pair(arr[:, 0], config.ci_level),
                ci_upper=_percentile_pair(arr[:, 1], config.ci_level),
            )
    return TableBootstrap(bounds=bounds, failures=failures, scalars=scalars)


def bootstrap_scalar(
    data: FusedDataset,
    statistic: Callable[[FusedDataset], float],
    config: BootstrapConfig,
) -> tuple[float, tuple[float, float]]:
    """Bootstrap SD and percentile CI of a scalar statistic."""
    draws = []
    failures = 0
    for rng in config.replicate_rngs():
        try:
            draws.append(float(statistic(resample(data, rng))))
        except (EstimationError, np.linalg.LinAlgError):
            failures += 1
    if failures > config.replicates // 2:
        raise EstimationError(f"bootstrap failed in {failures}/{config.replicates} replicates")
    arr = np.asarray(draws)
    return float(np.std(arr, ddof=1)), _percentile_pair(arr, config.ci_level)
