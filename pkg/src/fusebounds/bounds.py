"""Interval results shared by every bound-producing routine."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BoundResult:
    """Lower/upper ATE bound with optional bootstrap uncertainty.

    ``sd_lower``/``sd_upper`` are bootstrap standard deviations of the two
    endpoints, ``ci_lower``/``ci_upper`` percentile intervals for them. The
    plain constructor leaves those unset; the bootstrap module fills them via
    ``dataclasses.replace``.
    """

    lower: float
    upper: float
    sd_lower: float | None = None
    sd_upper: float | None = None
    ci_lower: tuple[float, float] | None = None
    ci_upper: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if not (self.lower <= self.upper):
            raise ValueError(f"lower bound {self.lower} exceeds upper bound {self.upper}")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def to_json(self) -> dict:
        out: dict = {"lower": self.lower, "upper": self.upper, "width": self.width}
        if self.sd_lower is not None:
            out["sd_lower"] = self.sd_lower
            out["sd_upper"] = self.sd_upper
        if self.ci_lower is not None:
            out["ci_lower"] = list(self.ci_lower)
            out["ci_upper"] = list(self.ci_upper)
        return out
