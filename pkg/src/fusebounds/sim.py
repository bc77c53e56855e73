"""Synthetic data-generating processes and the bound-width experiments.

Two scenarios share a common design: covariates drawn for a super-population,
trial membership sampled from a truncated logistic selection model (the
truncation encodes explicit eligibility criteria, so ineligible units have
zero selection probability), an observational sample drawn at random from the
non-trial units, and an unmeasured confounder entering only the observational
treatment and outcome models.

Scenario 1: five covariates N(10, 4^2), confounder N(10, 3^2), constant
treatment effect 40, eligibility thresholds the fifth covariate.
Scenario 2: three covariates N(10, 2^2), confounder N(0, 4^2), constant
treatment effect 10, eligibility thresholds the second and third covariates.

The observational sample is a modest random subsample (defaults below); the
trial sample size is whatever the selection model yields, so it shrinks to
nothing as the overlap proportion q tends to zero.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, ndtri

from . import generalize as gen_mod
from .bootstrap import BootstrapConfig, bootstrap_table
from .dataset import EligibilityCriteria, FusedDataset, Rule, write_csv
from .epsilon import EpsilonBox
from .ovb import R2Box
from .regress import EstimationError
from .synthesis import (
    EpsilonSpec,
    FrameworkSpec,
    R2Spec,
    os_only_bounds,
    subpopulation_bound,
    synthesize,
)

log = logging.getLogger(__name__)

DEFAULT_OS_SIZE = {"I": 500, "II": 2000}


class SimulationError(RuntimeError):
    """Data generation could not produce a usable sample."""


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "I"
    q: float = 0.7
    super_population_size: int = 50_000
    os_size: int | None = None
    seed: int = 0
    replications: int = 20

    def __post_init__(self) -> None:
        if self.scenario not in ("I", "II"):
            raise ValueError("scenario must be 'I' or 'II'")
        if not (0.0 < self.q <= 1.0):
            raise ValueError("q must lie in (0, 1]")
        if self.super_population_size < 100:
            raise ValueError("super-population must have at least 100 units")

    def resolved_os_size(self) -> int:
        return self.os_size if self.os_size is not None else DEFAULT_OS_SIZE[self.scenario]


@dataclass(frozen=True)
class GeneratedData:
    """Analysis-ready dataset plus generator-only columns.

    The confounder and potential outcomes never appear in the dataset schema,
    so estimator code cannot see them; they ride along for oracle checks.
    """

    dataset: FusedDataset
    psi_true: float
    scenario: str
    q: float
    u_rct: np.ndarray
    u_os: np.ndarray
    y1_rct: np.ndarray
    y0_rct: np.ndarray
    y1_os: np.ndarray
    y0_os: np.ndarray


# ---------------------------------------------------------------------------
# Scenario definitions
# ---------------------------------------------------------------------------

S1_COV_MEAN, S1_COV_SD = 10.0, 4.0
S1_U_MEAN, S1_U_SD = 10.0, 3.0
S1_SELECT_INTERCEPT = -3.0
S1_SELECT_COEFS = np.array([0.5, -0.3, -0.5, -0.4, 0.1])
S1_TREAT_COEFS = np.array([0.5, -0.5, -0.3, 0.5, -0.3])
S1_TREAT_U = 0.2
S1_OUTCOME_COEFS = np.array([0.0, 1.5, 2.0, 2.0, 0.5])
S1_OUTCOME_U = 3.0
S1_NOISE_SD = 3.0
S1_EFFECT = 40.0

S2_COV_MEAN, S2_COV_SD = 10.0, 2.0
S2_U_SD = 4.0
S2_SELECT_INTERCEPT = -2.0
S2_SELECT_COEFS = np.array([0.4, -0.3, -0.5])
S2_TREAT_COEFS = np.array([0.5, -0.6, 0.3])
S2_TREAT_U = 0.5
S2_OUTCOME_COEFS = np.array([1.0, 1.5, 2.0])
S2_OUTCOME_U = 0.5
S2_NOISE_SD = 1.0
S2_EFFECT = 10.0


def _rng_for(seed: int, key: tuple) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def _criteria_scenario1(q: float) -> EligibilityCriteria:
    if q >= 1.0:
        return EligibilityCriteria()
    threshold = S1_COV_MEAN + S1_COV_SD * float(ndtri(q))
    return EligibilityCriteria((Rule("x5", "<=", threshold),))


def _criteria_scenario2(q: float) -> EligibilityCriteria:
    if q >= 1.0:
        return EligibilityCriteria()
    threshold = S2_COV_MEAN + S2_COV_SD * float(ndtri(q))
    return EligibilityCriteria((Rule("x2", "<=", threshold), Rule("x3", "<=", threshold)))


def _assemble(config, rng, schema, x, u, eligible, select_lin, treat_lin,
              outcome_base, effect, noise_sd, criteria, psi_true) -> GeneratedData:
    m = x.shape[0]
    p_select = expit(select_lin) * eligible
    s = rng.random(m) < p_select
    n = int(s.sum())
    if n < 2:
        raise SimulationError(f"trial sample came out with {n} unit(s)")

    a_rct = (rng.random(n) < 0.5).astype(float)
    if a_rct.sum() in (0.0, float(n)):
        raise SimulationError("a trial treatment arm came out empty")
    noise_rct = rng.normal(0.0, noise_sd, n)
    y0_rct = outcome_base[s] + noise_rct
    y1_rct = y0_rct + effect
    y_rct = np.where(a_rct == 1.0, y1_rct, y0_rct)

    pool = np.flatnonzero(~s)
    os_size = config.resolved_os_size()
    if pool.size < os_size:
        raise SimulationError("not enough non-trial units for the observational sample")
    os_idx = rng.choice(pool, size=os_size, replace=False)
    u_os = u[os_idx]
    a_os = (rng.random(os_size) < expit(treat_lin[os_idx])).astype(float)
    # Observational outcomes add the confounder term on top of the shared base.
    conf_term = (S1_OUTCOME_U if config.scenario == "I" else S2_OUTCOME_U) * u_os
    noise_os = rng.normal(0.0, noise_sd, os_size)
    y0_os = outcome_base[os_idx] + conf_term + noise_os
    y1_os = y0_os + effect
    y_os = np.where(a_os == 1.0, y1_os, y0_os)
    v_os = 1.0 - eligible[os_idx]

    dataset = FusedDataset.from_arrays(
        schema,
        y_rct, a_rct, x[s],
        y_os, a_os, x[os_idx], v_os,
        criteria=criteria,
    )
    return GeneratedData(
        dataset=dataset,
        psi_true=psi_true,
        scenario=config.scenario,
        q=config.q,
        u_rct=u[s],
        u_os=u_os,
        y1_rct=y1_rct,
        y0_rct=y0_rct,
        y1_os=y1_os,
        y0_os=y0_os,
    )


def _generate_scenario1(config: ScenarioConfig, rng) -> GeneratedData:
    m = config.super_population_size
    x = rng.normal(S1_COV_MEAN, S1_COV_SD, (m, 5))
    u = rng.normal(S1_U_MEAN, S1_U_SD, m)
    criteria = _criteria_scenario1(config.q)
    eligible = (criteria.v_star_array(x, ("x1", "x2", "x3", "x4", "x5")) == 0).astype(float)
    select_lin = S1_SELECT_INTERCEPT + x @ S1_SELECT_COEFS
    treat_lin = x @ S1_TREAT_COEFS + S1_TREAT_U * u
    outcome_base = 1.0 + x @ S1_OUTCOME_COEFS
    return _assemble(
        config, rng, ("x1", "x2", "x3", "x4", "x5"), x, u, eligible,
        select_lin, treat_lin, outcome_base, S1_EFFECT, S1_NOISE_SD, criteria, S1_EFFECT,
    )


def _generate_scenario2(config: ScenarioConfig, rng) -> GeneratedData:
    m = config.super_population_size
    x = rng.normal(S2_COV_MEAN, S2_COV_SD, (m, 3))
    u = rng.normal(0.0, S2_U_SD, m)
    criteria = _criteria_scenario2(config.q)
    eligible = (criteria.v_star_array(x, ("x1", "x2", "x3")) == 0).astype(float)
    select_lin = S2_SELECT_INTERCEPT + x @ S2_SELECT_COEFS
    treat_lin = x @ S2_TREAT_COEFS + S2_TREAT_U * u
    outcome_base = 1.0 + x @ S2_OUTCOME_COEFS
    return _assemble(
        config, rng, ("x1", "x2", "x3"), x, u, eligible,
        select_lin, treat_lin, outcome_base, S2_EFFECT, S2_NOISE_SD, criteria, S2_EFFECT,
    )


def generate(config: ScenarioConfig, key: tuple = ()) -> GeneratedData:
    """Generate one dataset, retrying with fresh derived seeds up to 3 times."""
    last: SimulationError | None = None
    for attempt in range(3):
        rng = _rng_for(config.seed, (*key, attempt))
        try:
            if config.scenario == "I":
                return _generate_scenario1(config, rng)
            return _generate_scenario2(config, rng)
        except SimulationError as err:
            last = err
            log.warning("generation attempt %d failed (%s); retrying", attempt + 1, err)
    raise last  # type: ignore[misc]


def gen_scenario1(config: ScenarioConfig, key: tuple = ()) -> GeneratedData:
    return generate(replace(config, scenario="I"), key)


def gen_scenario2(config: ScenarioConfig, key: tuple = ()) -> GeneratedData:
    return generate(replace(config, scenario="II"), key)


def export_generated(data: GeneratedData, directory) -> dict:
    """Write the analysis CSV, a sidecar with the hidden columns, and metadata."""
    os.makedirs(directory, exist_ok=True)
    data_path = os.path.join(directory, "data.csv")
    hidden_path = os.path.join(directory, "hidden.csv")
    meta_path = os.path.join(directory, "meta.json")
    write_csv(data.dataset, data_path)
    with open(hidden_path, "w", encoding="utf-8") as fh:
        fh.write("u,y_treated,y_control\n")
        for u, y1, y0 in zip(data.u_rct, data.y1_rct, data.y0_rct):
            fh.write(f"{u!r},{y1!r},{y0!r}\n")
        for u, y1, y0 in zip(data.u_os, data.y1_os, data.y0_os):
            fh.write(f"{u!r},{y1!r},{y0!r}\n")
    meta = {
        "scenario": data.scenario,
        "q": data.q,
        "psi_true": data.psi_true,
        "criteria": data.dataset.criteria.to_json() if data.dataset.criteria else [],
        "schema": list(data.dataset.schema),
        "n": data.dataset.n,
        "n_os": data.dataset.n_os,
    }
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"data": data_path, "hidden": hidden_path, "meta": meta_path}


# ---------------------------------------------------------------------------
# Oracle conditional means for scenario 2 (confounder observed)
# ---------------------------------------------------------------------------


def scenario2_conditional_means(n_nodes: int = 64) -> dict:
    """Exact conditional-mean functions of the scenario-2 observational model.

    The short means integrate the confounder out of the logistic treatment
    model with Gauss-Hermite quadrature, which is accurate to float precision
    for these smooth integrands.
    """
    nodes, weights = np.polynomial.hermite.hermgauss(n_nodes)
    u_nodes = np.sqrt(2.0) * S2_U_SD * nodes
    w = weights / np.sqrt(np.pi)

    def _lin(x):
        return np.asarray(x) @ S2_TREAT_COEFS

    def mean_a_long(u, x):
        return expit(_lin(x) + S2_TREAT_U * np.asarray(u))

    def mean_a_short(x):
        eta = _lin(x)[:, None] + S2_TREAT_U * u_nodes[None, :]
        return expit(eta) @ w

    def mean_y_long(u, a, x):
        return 1.0 + S2_EFFECT * np.asarray(a) + np.asarray(x) @ S2_OUTCOME_COEFS \
            + S2_OUTCOME_U * np.asarray(u)

    def mean_y_short(a, x):
        a = np.asarray(a)
        eta = _lin(x)[:, None] + S2_TREAT_U * u_nodes[None, :]
        p = expit(eta)
        num = (p * u_nodes[None, :]) @ w
        den = p @ w
        e_u_treated = num / den
        e_u_control = -num / (1.0 - den)
        e_u = np.where(a == 1.0, e_u_treated, e_u_control)
        return 1.0 + S2_EFFECT * a + np.asarray(x) @ S2_OUTCOME_COEFS + S2_OUTCOME_U * e_u

    return {
        "mean_y_long": mean_y_long,
        "mean_y_short": mean_y_short,
        "mean_a_long": mean_a_long,
        "mean_a_short": mean_a_short,
    }


# ---------------------------------------------------------------------------
# Experiment runners
# ---------------------------------------------------------------------------


def default_frameworks(scenario: str) -> list[tuple[str, FrameworkSpec]]:
    if scenario == "I":
        box = EpsilonBox((0.9, 1.1), (0.9, 1.1))
        return [(name, EpsilonSpec(estimator=name, box=box)) for name in ("or", "ht", "hajek", "dr")]
    return [
        ("x1_benchmark", R2Spec(mode="benchmark", benchmark="x1", k_a=6.0, k_y=1.0)),
        ("fixed_value", R2Spec(mode="fixed", box=R2Box(0.8, 0.9))),
    ]


def default_sweep_framework(scenario: str) -> FrameworkSpec:
    if scenario == "I":
        return EpsilonSpec(estimator="or", box=EpsilonBox((0.9, 1.1), (0.9, 1.1)))
    return R2Spec(mode="transform", sub_box=R2Box(0.1, 0.9))


def _cell_key(label: str, method: str) -> str:
    return f"{label}::{method}"


def evaluate_cells(
    data: FusedDataset,
    frameworks: Sequence[tuple[str, FrameworkSpec]],
    gen_methods: Sequence[str],
) -> dict:
    """All (framework x column) bound endpoints for one dataset.

    Columns are the observational-only bound plus one synthesis per
    generalization method. Cells that fail numerically are simply absent.
    """
    cells: dict = {}
    gen_estimates: Mapping[str, float] | None = None
    if gen_methods:
        try:
            eligible = data.os_subset(0)
            fit = gen_mod.estimate_all(
                data.rct_y, data.rct_a, data.rct_x, eligible.x, data.schema
            )
            gen_estimates = fit.estimates
        except (EstimationError, np.linalg.LinAlgError):
            gen_estimates = None
    for label, spec in frameworks:
        try:
            os_b = os_only_bounds(data, spec)
            cells[_cell_key(label, "os")] = (os_b.lower, os_b.upper)
        except (EstimationError, np.linalg.LinAlgError):
            pass
        if gen_estimates is None or data.n1 == 0:
            if gen_estimates is not None:
                for method in gen_methods:
                    psi = gen_estimates[method]
                    cells[_cell_key(label, method)] = (psi, psi)
            continue
        try:
            bound1 = subpopulation_bound(data, spec)
        except (EstimationError, np.linalg.LinAlgError):
            continue
        for method in gen_methods:
            combined = synthesize(gen_estimates[method], bound1, data.p0, data.p1)
            cells[_cell_key(label, method)] = (combined.lower, combined.upper)
    return cells


@dataclass
class CellSummary:
    estimator: str
    gen_method: str
    lb: float | None
    ub: float | None
    mbw: float | None
    sd_lb: float | None
    sd_ub: float | None
    failures: int
    reps: int

    def to_row(self) -> list:
        return [self.estimator, self.gen_method, self.lb, self.ub, self.mbw,
                self.sd_lb, self.sd_ub]


def _child_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


def run_fixed_q(
    config: ScenarioConfig,
    frameworks: Sequence[tuple[str, FrameworkSpec]] | None = None,
    gen_methods: Sequence[str] = ("om", "ipsw", "aipsw"),
    bootstrap_config: BootstrapConfig | None = None,
) -> list[CellSummary]:
    """Monte Carlo table of bounds per (sensitivity framework x column).

    Point columns are averaged over replications; sd columns average the
    per-replication bootstrap endpoint SDs. Failed cells are counted per
    replication and never abort the table.
    """
    frameworks = list(frameworks) if frameworks is not None else default_frameworks(config.scenario)
    labels = [label for label, _ in frameworks]
    columns = ["os", *gen_methods]
    acc: dict = {
        _cell_key(lab, col): {"lb": [], "ub": [], "sd_lb": [], "sd_ub": []}
        for lab in labels
        for col in columns
    }
    for rep in range(config.replications):
        data = generate(config, key=(rep,)).dataset
        try:
            base = evaluate_cells(data, frameworks, gen_methods)
        except (EstimationError, np.linalg.LinAlgError):
            base = {}
        table = None
        if bootstrap_config is not None and base:
            bcfg = replace(bootstrap_config, seed=_child_seed(config.seed, rep, 1))
            table = bootstrap_table(
                data, lambda d: evaluate_cells(d, frameworks, gen_methods), bcfg
            )
        for key, slot in acc.items():
            if key not in base:
                continue
            lb, ub = base[key]
            slot["lb"].append(lb)
            slot["ub"].append(ub)
            if table is not None and key in table.bounds:
                bound = table.bounds[key]
                if bound.sd_lower is not None:
                    slot["sd_lb"].append(bound.sd_lower)
                    slot["sd_ub"].append(bound.sd_upper)

    out: list[CellSummary] = []
    for lab in labels:
        for col in columns:
            slot = acc[_cell_key(lab, col)]
            used = len(slot["lb"])
            if used == 0:
                out.append(CellSummary(lab, col, None, None, None, None, None,
                                       config.replications, config.replications))
                continue
            lbs = np.asarray(slot["lb"])
            ubs = np.asarray(slot["ub"])
            out.append(
                CellSummary(
                    estimator=lab,
                    gen_method=col,
                    lb=float(lbs.mean()),
                    ub=float(ubs.mean()),
                    mbw=float((ubs - lbs).mean()),
                    sd_lb=float(np.mean(slot["sd_lb"])) if slot["sd_lb"] else None,
                    sd_ub=float(np.mean(slot["sd_ub"])) if slot["sd_ub"] else None,
                    failures=config.replications - used,
                    reps=config.replications,
                )
            )
    return out


@dataclass
class SweepPoint:
    q: float
    ratio: float | None
    reps_used: int
    gen_ok: int
    ratio_values: tuple[float, ...] = ()


def run_q_sweep(
    config: ScenarioConfig,
    q_grid: Sequence[float],
    framework: FrameworkSpec | None = None,
    gen_method: str = "om",
) -> list[SweepPoint]:
    """Width ratio (synthesis over observational-only) across overlap levels.

    The ratio is pure width arithmetic, p1 * W1 / W0, so it stays defined even
    when the trial sample is too small to fit the generalization nuisances;
    those replications only lose the point-estimate columns (`gen_ok` counts
    the ones that kept them). Replications whose generation fails outright are
    dropped from the point.
    """
    framework = framework if framework is not None else default_sweep_framework(config.scenario)
    points: list[SweepPoint] = []
    for qi, q in enumerate(q_grid):
        if not (0.0 < q < 1.0):
            raise ValueError("sweep grid values must lie in (0, 1)")
        ratios: list[float] = []
        gen_ok = 0
        for rep in range(config.replications):
            try:
                data = generate(replace(config, q=float(q)), key=(qi, rep)).dataset
            except SimulationError:
                continue
            try:
                w0 = os_only_bounds(data, framework).width
                if w0 <= 0.0:
                    continue
                if data.n1 == 0:
                    ratios.append(0.0)
                else:
                    w1 = subpopulation_bound(data, framework).width
                    ratios.append(data.p1 * w1 / w0)
            except (EstimationError, np.linalg.LinAlgError):
                continue
            try:
                eligible = data.os_subset(0)
                gen_mod.estimate(
                    data.rct_y, data.rct_a, data.rct_x, eligible.x, data.schema,
                    gen_mod.GeneralizationConfig(method=gen_method),
                )
                gen_ok += 1
            except (EstimationError, np.linalg.LinAlgError):
                pass
        points.append(
            SweepPoint(
                q=float(q),
                ratio=float(np.mean(ratios)) if ratios else None,
                reps_used=len(ratios),
                gen_ok=gen_ok,
                ratio_values=tuple(ratios),
            )
        )
    return points
