"""Fused trial + observational data: loading, validation, eligibility splits.

A :class:`FusedDataset` holds the randomized-trial rows (s=1) and the
observational rows (s=0) with an eligibility-violation indicator ``v_star``
on the observational side. Trial rows must satisfy every declared
inclusion/exclusion rule. The container is immutable after construction, so
reads are safe from concurrent tasks.
"""

from __future__ import annotations

import csv
import operator
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np


class ValidationError(ValueError):
    """Input data or configuration violates a structural requirement."""


_OPS = {
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
    "==": operator.eq,
    "!=": operator.ne,
}
_OP_ALIASES = {"≤": "<=", "≥": ">=", "=": "==", "≠": "!="}


def _norm_op(op: str) -> str:
    op = _OP_ALIASES.get(op, op)
    if op not in _OPS:
        raise ValidationError(f"unknown comparison operator {op!r}")
    return op


@dataclass(frozen=True)
class Rule:
    """Single-variable threshold rule; a unit satisfies it iff ``value op threshold``."""

    var: str
    op: str
    threshold: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "op", _norm_op(self.op))
        object.__setattr__(self, "threshold", float(self.threshold))

    def holds(self, value) -> bool | np.ndarray:
        return _OPS[self.op](value, self.threshold)

    def to_json(self) -> dict:
        return {"var": self.var, "op": self.op, "threshold": self.threshold}


@dataclass(frozen=True)
class EligibilityCriteria:
    """Conjunction of threshold rules; a unit is eligible iff every rule holds."""

    rules: tuple[Rule, ...] = ()

    @classmethod
    def from_json(cls, items) -> "EligibilityCriteria":
        return cls(tuple(Rule(d["var"], d["op"], d["threshold"]) for d in items))

    def to_json(self) -> list[dict]:
        return [r.to_json() for r in self.rules]

    def v_star(self, values: Mapping[str, float]) -> int:
        """1 iff any rule is violated; the empty conjunction is vacuously satisfied."""
        for rule in self.rules:
            if rule.var not in values:
                raise ValidationError(f"criteria reference unknown covariate {rule.var!r}")
            if not rule.holds(values[rule.var]):
                return 1
        return 0

    def v_star_array(self, x: np.ndarray, schema: tuple[str, ...]) -> np.ndarray:
        violated = np.zeros(x.shape[0], dtype=bool)
        for rule in self.rules:
            if rule.var not in schema:
                raise ValidationError(f"criteria reference unknown covariate {rule.var!r}")
            violated |= ~rule.holds(x[:, schema.index(rule.var)])
        return violated.astype(np.int64)


@dataclass(frozen=True)
class UnitRecord:
    """One unit: outcome, treatment, study membership, covariates, eligibility flag."""

    y: float
    a: int
    s: int
    covariates: dict[str, float]
    v_star: int


def apply_criteria(record: UnitRecord | Mapping[str, float], criteria: EligibilityCriteria) -> int:
    """Pure, deterministic eligibility-violation indicator for one record."""
    values = record.covariates if isinstance(record, UnitRecord) else record
    return criteria.v_star(values)


@dataclass(frozen=True)
class Subpopulation:
    """Array view of a slice of observational rows."""

    y: np.ndarray
    a: np.ndarray
    x: np.ndarray

    @property
    def size(self) -> int:
        return self.y.shape[0]


def _lock(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FusedDataset:
    """Validated trial + observational sample with shared covariate schema.

    Counts follow the usual convention: ``n`` trial rows, ``n_os`` observational
    rows split into ``n0`` trial-eligible and ``n1`` ineligible ones, with
    ``p0 = n0/n_os`` the sample overlap proportion.
    """

    schema: tuple[str, ...]
    rct_y: np.ndarray
    rct_a: np.ndarray
    rct_x: np.ndarray
    os_y: np.ndarray
    os_a: np.ndarray
    os_x: np.ndarray
    os_v_star: np.ndarray
    criteria: EligibilityCriteria | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "schema", tuple(self.schema))
        for name in ("rct_y", "rct_a", "rct_x", "os_y", "os_a", "os_x", "os_v_star"):
            object.__setattr__(self, name, _lock(np.asarray(getattr(self, name), dtype=float)))

    # -- counts ---------------------------------------------------------
    @property
    def n(self) -> int:
        return int(self.rct_y.shape[0])

    @property
    def n_os(self) -> int:
        return int(self.os_y.shape[0])

    @property
    def n0(self) -> int:
        return int((self.os_v_star == 0).sum())

    @property
    def n1(self) -> int:
        return int((self.os_v_star == 1).sum())

    @property
    def p0(self) -> float:
        return self.n0 / self.n_os

    @property
    def p1(self) -> float:
        return 1.0 - self.p0

    # -- views ----------------------------------------------------------
    @property
    def rct(self) -> Subpopulation:
        return Subpopulation(self.rct_y, self.rct_a, self.rct_x)

    @property
    def os(self) -> Subpopulation:
        return Subpopulation(self.os_y, self.os_a, self.os_x)

    def os_subset(self, v_star: int) -> Subpopulation:
        mask = self.os_v_star == v_star
        return Subpopulation(self.os_y[mask], self.os_a[mask], self.os_x[mask])

    def records(self) -> Iterator[UnitRecord]:
        for i in range(self.n):
            yield UnitRecord(
                float(self.rct_y[i]), int(self.rct_a[i]), 1,
                dict(zip(self.schema, self.rct_x[i])), 0,
            )
        for i in range(self.n_os):
            yield UnitRecord(
                float(self.os_y[i]), int(self.os_a[i]), 0,
                dict(zip(self.schema, self.os_x[i])), int(self.os_v_star[i]),
            )

    # -- construction ----------------------------------------------------
    @classmethod
    def from_arrays(cls, schema, rct_y, rct_a, rct_x, os_y, os_a, os_x, os_v_star,
                    criteria: EligibilityCriteria | None = None) -> "FusedDataset":
        ds = cls(tuple(schema), rct_y, rct_a, rct_x, os_y, os_a, os_x, os_v_star, criteria)
        ds._validate()
        return ds

    def _validate(self) -> None:
        if self.n < 1:
            raise ValidationError("trial sample is empty")
        if self.n_os < 1:
            raise ValidationError("observational sample is empty")
        if self.rct_x.ndim != 2 or self.rct_x.shape[1] != len(self.schema):
            raise ValidationError("trial covariate block does not match the schema")
        if self.os_x.ndim != 2 or self.os_x.shape[1] != len(self.schema):
            raise ValidationError("observational covariate block does not match the schema")
        for label, arr in (("trial", self.rct_a), ("observational", self.os_a)):
            if not np.all(np.isin(arr, (0.0, 1.0))):
                raise ValidationError(f"{label} treatment indicator is not binary")
        if not np.all(np.isin(self.os_v_star, (0.0, 1.0))):
            raise ValidationError("v_star indicator is not binary")
        for label, arr in (
            ("trial outcomes", self.rct_y), ("trial covariates", self.rct_x),
            ("observational outcomes", self.os_y), ("observational covariates", self.os_x),
        ):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite value in {label}")
        treated = int(self.rct_a.sum())
        if treated == 0 or treated == self.n:
            raise ValidationError("a trial treatment arm is empty")
        if self.criteria is not None and self.criteria.rules:
            rct_v = self.criteria.v_star_array(self.rct_x, self.schema)
            if rct_v.any():
                bad = int(np.argmax(rct_v > 0))
                raise ValidationError(f"ineligible RCT unit at trial row {bad}")
            derived = self.criteria.v_star_array(self.os_x, self.schema)
            if not np.array_equal(derived, self.os_v_star.astype(np.int64)):
                bad = int(np.argmax(derived != self.os_v_star))
                raise ValidationError(
                    f"v_star disagrees with the eligibility criteria at observational row {bad}"
                )


def split_by_eligibility(data: FusedDataset) -> tuple[Subpopulation, Subpopulation]:
    """Disjoint partition of the observational rows: (eligible, ineligible)."""
    return data.os_subset(0), data.os_subset(1)


# ---------------------------------------------------------------------------
# CSV interface
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SchemaConfig:
    """Column mapping plus eligibility criteria for CSV ingestion."""

    y: str
    a: str
    s: str
    covariates: tuple[str, ...]
    v_star: str | None = None
    criteria: EligibilityCriteria = EligibilityCriteria()

    @classmethod
    def from_json(cls, obj: Mapping) -> "SchemaConfig":
        try:
            return cls(
                y=obj["y"],
                a=obj["a"],
                s=obj["s"],
                covariates=tuple(obj["covariates"]),
                v_star=obj.get("v_star"),
                criteria=EligibilityCriteria.from_json(obj.get("criteria", [])),
            )
        except KeyError as err:
            raise ValidationError(f"schema config is missing required key {err.args[0]!r}") from None


def _cell(row: Mapping[str, str], col: str, idx: int) -> float:
    raw = row.get(col)
    if raw is None or raw.strip() == "":
        raise ValidationError(f"row {idx}: missing value in column {col!r}")
    try:
        return float(raw)
    except ValueError:
        raise ValidationError(f"row {idx}: non-numeric value {raw!r} in column {col!r}") from None


def load_csv(path, config: SchemaConfig) -> FusedDataset:
    """Read a header CSV per the schema config and return a validated dataset.

    ``v_star`` is read from its mapped column when present, otherwise derived
    from the criteria; an explicit column is still cross-checked against the
    criteria and any mismatch is rejected.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [config.y, config.a, config.s, *config.covariates]
        if config.v_star is not None:
            needed.append(config.v_star)
        missing = [c for c in needed if c not in header]
        if missing:
            raise ValidationError(f"CSV is missing mapped columns: {', '.join(missing)}")
        rows = list(reader)
    if not rows:
        raise ValidationError("CSV contains no data rows")

    y = np.empty(len(rows))
    a = np.empty(len(rows))
    s = np.empty(len(rows))
    x = np.empty((len(rows), len(config.covariates)))
    v = np.zeros(len(rows))
    for i, row in enumerate(rows, start=1):
        y[i - 1] = _cell(row, config.y, i)
        a[i - 1] = _cell(row, config.a, i)
        s[i - 1] = _cell(row, config.s, i)
        for j, name in enumerate(config.covariates):
            x[i - 1, j] = _cell(row, name, i)
        if config.v_star is not None:
            v[i - 1] = _cell(row, config.v_star, i)
    if not np.all(np.isin(s, (0.0, 1.0))):
        raise ValidationError("study membership column is not binary")

    if config.v_star is None:
        if config.criteria.rules:
            v = config.criteria.v_star_array(x, config.covariates).astype(float)
        else:
            v = np.zeros(len(rows))
    rct = s == 1.0
    if np.any(v[rct] != 0.0):
        bad = int(np.argmax(v[rct] != 0.0))
        raise ValidationError(f"ineligible RCT unit at trial row {bad}")
    return FusedDataset.from_arrays(
        config.covariates,
        y[rct], a[rct], x[rct],
        y[~rct], a[~rct], x[~rct], v[~rct],
        criteria=config.criteria,
    )


def write_csv(data: FusedDataset, path) -> None:
    """Full-precision export in the load_csv layout (y, a, s, v_star, covariates)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "a", "s", "v_star", *data.schema])
        for i in range(data.n):
            writer.writerow(
                [repr(float(data.rct_y[i])), int(data.rct_a[i]), 1, 0]
                + [repr(float(val)) for val in data.rct_x[i]]
            )
        for i in range(data.n_os):
            writer.writerow(
                [repr(float(data.os_y[i])), int(data.os_a[i]), 0, int(data.os_v_star[i])]
                + [repr(float(val)) for val in data.os_x[i]]
            )
