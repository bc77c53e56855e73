"""Synthesis of trial generalization with observational sensitivity bounds.

The combined estimator is the overlap-weighted mixture

    psi_syn(eps1) = p0 * psi_gen + p1 * psi_1(eps1)

where ``psi_gen`` transports the trial contrast to the eligible cohort and
``psi_1`` is a sensitivity-analysis estimator on the trial-ineligible subset.
Because the combination is affine, interval endpoints combine exactly and the
combined width is ``p1`` times the sub-population width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping

from . import epsilon as eps_mod
from . import generalize as gen_mod
from . import ovb as ovb_mod
from .bounds import BoundResult
from .dataset import FusedDataset, ValidationError, split_by_eligibility
from .regress import EstimationError


# ---------------------------------------------------------------------------
# Framework specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpsilonSpec:
    """Outcome-ratio framework: which modified estimator, and the boxes.

    ``box`` applies to full-cohort analyses; ``sub_box`` (defaulting to the
    same box) applies to the trial-ineligible subset inside the synthesis.
    """

    estimator: str = "or"
    box: eps_mod.EpsilonBox = eps_mod.EpsilonBox((0.9, 1.1), (0.9, 1.1))
    sub_box: eps_mod.EpsilonBox | None = None

    def __post_init__(self) -> None:
        if self.estimator not in eps_mod.ESTIMATORS:
            raise ValueError(f"unknown sensitivity estimator {self.estimator!r}")

    def effective_sub_box(self) -> eps_mod.EpsilonBox:
        return self.sub_box if self.sub_box is not None else self.box

    def with_sub_box(self, box) -> "EpsilonSpec":
        return replace(self, sub_box=box)


@dataclass(frozen=True)
class R2Spec:
    """Partial-R2 framework configuration.

    Modes: ``fixed`` (boxes given), ``benchmark`` (boxes from an observed
    covariate's strength times k multipliers, recomputed on each analysis
    population), ``transform`` (sub-population boxes given; the full-cohort
    box is mapped through the variance-decomposition transform with the
    nuisance ``theta`` terms, default 0).
    """

    mode: str = "fixed"
    box: ovb_mod.R2Box | None = None
    sub_box: ovb_mod.R2Box | None = None
    benchmark: str | None = None
    k_a: float = 1.0
    k_y: float = 1.0
    theta: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if self.mode not in ("fixed", "benchmark", "transform"):
            raise ValueError(f"unknown R2 framework mode {self.mode!r}")
        if self.mode == "fixed" and self.box is None:
            raise ValueError("fixed mode requires a box")
        if self.mode == "benchmark" and not self.benchmark:
            raise ValueError("benchmark mode requires a benchmark covariate")
        if self.mode == "transform" and self.sub_box is None:
            raise ValueError("transform mode requires a sub-population box")

    def effective_sub_box(self) -> ovb_mod.R2Box | None:
        return self.sub_box if self.sub_box is not None else self.box

    def with_sub_box(self, box) -> "R2Spec":
        return replace(self, mode="fixed", box=box if self.box is None else self.box, sub_box=box)


FrameworkSpec = EpsilonSpec | R2Spec


def framework_from_json(obj: Mapping) -> FrameworkSpec:
    kind = obj.get("kind")
    if kind == "epsilon":
        box = eps_mod.EpsilonBox(
            tuple(obj.get("eps1_range", (0.9, 1.1))),
            tuple(obj.get("eps0_range", (0.9, 1.1))),
            int(obj.get("grid_resolution", 11)),
        )
        sub = None
        if "sub_eps1_range" in obj or "sub_eps0_range" in obj:
            sub = eps_mod.EpsilonBox(
                tuple(obj.get("sub_eps1_range", obj.get("eps1_range", (0.9, 1.1)))),
                tuple(obj.get("sub_eps0_range", obj.get("eps0_range", (0.9, 1.1)))),
                int(obj.get("grid_resolution", 11)),
            )
        return EpsilonSpec(estimator=obj.get("estimator", "or"), box=box, sub_box=sub)
    if kind == "r2":
        mode = obj.get("mode", "fixed")
        box = None
        if "a_max" in obj:
            box = ovb_mod.R2Box(float(obj["a_max"]), float(obj["y_max"]))
        sub = None
        if "sub_a_max" in obj:
            sub = ovb_mod.R2Box(float(obj["sub_a_max"]), float(obj["sub_y_max"]))
        return R2Spec(
            mode=mode,
            box=box,
            sub_box=sub,
            benchmark=obj.get("benchmark"),
            k_a=float(obj.get("k_a", 1.0)),
            k_y=float(obj.get("k_y", 1.0)),
            theta=tuple(obj.get("theta", (0.0, 0.0))),
        )
    raise ValidationError(f"unknown framework kind {kind!r}")


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthesisResult:
    """Generalization point, sub-population bound, and their affine mixture."""

    psi_gen: float
    bound1: BoundResult | None
    combined: BoundResult
    p0: float
    p1: float
    variance_at: dict | None = None

    def to_json(self) -> dict:
        return {
            "psi_gen": self.psi_gen,
            "bound1": None if self.bound1 is None else self.bound1.to_json(),
            "combined": self.combined.to_json(),
            "p0": self.p0,
            "p1": self.p1,
            "variance_at": self.variance_at,
        }


def synthesize(psi_gen: float, bound1: BoundResult, p0: float, p1: float) -> BoundResult:
    """Affine combination of the generalization point with the subset bound."""
    if abs(p0 + p1 - 1.0) > 1e-9:
        raise EstimationError("overlap proportions must sum to one")
    return BoundResult(
        lower=p0 * psi_gen + p1 * bound1.lower,
        upper=p0 * psi_gen + p1 * bound1.upper,
    )


# ---------------------------------------------------------------------------
# Bound computations
# ---------------------------------------------------------------------------


def _epsilon_bound(pop, names, spec: EpsilonSpec, box) -> BoundResult:
    nuis = eps_mod.fit_sensitivity_nuisances(pop.y, pop.a, pop.x, names)
    return eps_mod.bounds_over_box(pop.y, pop.a, nuis, box, spec.estimator)


def _r2_box_for(pop, names, spec: R2Spec, data: FusedDataset | None, sub: bool):
    if spec.mode == "benchmark":
        return ovb_mod.benchmark_strengths(pop.y, pop.a, pop.x, names, spec.benchmark, spec.k_a, spec.k_y)
    if sub or spec.mode == "fixed":
        box = spec.effective_sub_box() if sub else spec.box
        if box is None:
            raise ValidationError("missing box for the R2 framework")
        return box
    # transform mode, full-cohort side: map the sub-population boxes through
    # the pooled-coordinate transform with per-stratum fitted variance gaps.
    assert data is not None
    sub_box = spec.effective_sub_box()
    min_rows = len(names) + 4
    if data.n0 < min_rows or data.n1 < min_rows:
        # Degenerate mixture: the transform tends to the surviving stratum's
        # coordinate, i.e. the sub-population box itself.
        return sub_box
    components = _fitted_gap_components(data, spec.theta)
    return ovb_mod.pooled_box_from_sub_boxes(sub_box, sub_box, components)


def _fitted_gap_components(data: FusedDataset, theta) -> ovb_mod.TransformComponents:
    """Variance-gap components from per-stratum short fits (no confounder needed)."""
    import numpy as np

    from .regress import add_intercept, fit_logistic, fit_ols

    gaps = {}
    for j in (0, 1):
        pop = data.os_subset(j)
        d_short = np.column_stack([np.ones(pop.size), pop.a, pop.x])
        m_y = fit_ols(d_short, pop.y).fitted_values
        m_a = fit_logistic(add_intercept(pop.x), pop.a).fitted_values
        gap_y = float(np.var(pop.y)) - float(np.var(m_y))
        gap_a = float(np.var(pop.a)) - float(np.var(m_a))
        if gap_y <= 0.0 or gap_a <= 0.0:
            raise EstimationError(f"degenerate variance gap in stratum {j}")
        gaps[j] = (gap_y, gap_a)
    # Cross-indexed convention: delta with index j is the gap on stratum 1-j.
    return ovb_mod.TransformComponents(
        p0=data.p0, p1=data.p1,
        r2_y_0=0.0, r2_y_1=0.0, r2_a_0=0.0, r2_a_1=0.0,
        delta_y_0=gaps[1][0], delta_y_1=gaps[0][0],
        delta_a_0=gaps[1][1], delta_a_1=gaps[0][1],
        theta_y=theta[1], theta_a=theta[0],
    )


def _r2_bound(pop, names, spec: R2Spec, data, sub: bool) -> BoundResult:
    box = _r2_box_for(pop, names, spec, data, sub)
    fit = ovb_mod.short_regression(pop.y, pop.a, pop.x, names)
    return ovb_mod.adjusted_bounds(fit, box)


def os_only_bounds(data: FusedDataset, spec: FrameworkSpec) -> BoundResult:
    """Sensitivity bound using the observational rows alone."""
    if isinstance(spec, EpsilonSpec):
        return _epsilon_bound(data.os, data.schema, spec, spec.box)
    return _r2_bound(data.os, data.schema, spec, data, sub=False)


def subpopulation_bound(data: FusedDataset, spec: FrameworkSpec) -> BoundResult:
    """Sensitivity bound on the trial-ineligible observational subset."""
    if data.n1 == 0:
        raise EstimationError("no trial-ineligible rows")
    sub = data.os_subset(1)
    if isinstance(spec, EpsilonSpec):
        return _epsilon_bound(sub, data.schema, spec, spec.effective_sub_box())
    return _r2_bound(sub, data.schema, spec, data, sub=True)


def synthesis_bounds(
    data: FusedDataset,
    spec: FrameworkSpec,
    gen_config: gen_mod.GeneralizationConfig | None = None,
) -> SynthesisResult:
    """Full synthesis: generalize to the eligible subset, bound the rest.

    With no ineligible rows the sensitivity side is unnecessary and the result
    is the width-zero interval at the generalization estimate.
    """
    gen_config = gen_config or gen_mod.GeneralizationConfig()
    eligible, _ = split_by_eligibility(data)
    psi_gen = gen_mod.estimate(
        data.rct_y, data.rct_a, data.rct_x, eligible.x, data.schema, gen_config
    )
    if data.n1 == 0:
        return SynthesisResult(
            psi_gen=psi_gen,
            bound1=None,
            combined=BoundResult(psi_gen, psi_gen),
            p0=1.0,
            p1=0.0,
        )
    bound1 = subpopulation_bound(data, spec)
    combined = synthesize(psi_gen, bound1, data.p0, data.p1)
    return SynthesisResult(psi_gen=psi_gen, bound1=bound1, combined=combined,
                           p0=data.p0, p1=data.p1)


def width_ratio(synthesis: BoundResult, os_only: BoundResult) -> float:
    """Synthesis width over observational-only width."""
    if os_only.width <= 0.0:
        raise EstimationError("observational-only bound has zero width")
    return synthesis.width / os_only.width


def asymptotic_variance(psi0: float, psi1_at_eps: float, p0: float,
                        sigma0_sq: float, sigma1_sq: float) -> float:
    """Large-sample variance of the synthesis estimator at a fixed coordinate:

        p0 (1 - p0) (psi0 - psi1)^2 + p0 sigma0^2 + p1 sigma1^2
    """
    if not (0.0 <= p0 <= 1.0):
        raise EstimationError("p0 must lie in [0, 1]")
    if sigma0_sq < 0.0 or sigma1_sq < 0.0:
        raise EstimationError("variance inputs must be nonnegative")
    return (
        p0 * (1.0 - p0) * (psi0 - psi1_at_eps) ** 2
        + p0 * sigma0_sq
        + (1.0 - p0) * sigma1_sq
    )


# ---------------------------------------------------------------------------
# Range calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationResult:
    spec: FrameworkSpec
    widths: tuple[float, ...]
    iterations: int

    @property
    def final_width(self) -> float:
        return self.widths[-1]


def calibrate_eps_range(
    data: FusedDataset,
    spec: FrameworkSpec,
    gen_config: gen_mod.GeneralizationConfig | None,
    w0: float,
    shrink: float = 0.9,
    max_iterations: int = 500,
) -> CalibrationResult:
    """Contract the sub-population box until the synthesis width is at most w0.

    Each iteration shrinks both axis intervals geometrically toward the
    no-confounding center ((1,1) for the outcome-ratio framework, (0,0) for
    the partial-R2 one), so the loop always terminates: a degenerate box has
    width zero. On success the final synthesis width is at most ``w0`` by the
    loop guard.
    """
    if w0 < 0.0:
        raise EstimationError("target width must be nonnegative")
    if not (0.0 < shrink < 1.0):
        raise EstimationError("shrink factor must lie in (0, 1)")

    current = spec
    if isinstance(spec, R2Spec) and spec.effective_sub_box() is None:
        # Benchmark mode: materialize the starting box once so contraction
        # has a concrete rectangle to act on.
        sub = data.os_subset(1)
        start = ovb_mod.benchmark_strengths(
            sub.y, sub.a, sub.x, data.schema, spec.benchmark, spec.k_a, spec.k_y
        )
        current = spec.with_sub_box(start)
    widths: list[float] = []
    for iteration in range(max_iterations + 1):
        box = current.effective_sub_box()
        result = synthesis_bounds(data, current, gen_config)
        width = result.combined.width
        widths.append(width)
        if width <= w0 or math.isclose(width, w0, abs_tol=1e-12):
            return CalibrationResult(spec=current, widths=tuple(widths), iterations=iteration)
        if isinstance(current, EpsilonSpec):
            current = current.with_sub_box(box.contracted(shrink, eps_mod.NO_CONFOUNDING))
        else:
            current = current.with_sub_box(box.contracted(shrink))
    raise EstimationError("calibration failed to reach the target width")
