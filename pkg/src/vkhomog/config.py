"""Experiment configuration models.

One JSON document per experiment; the same models validate CLI configs and
service request bodies.  Validation failures name the offending field via
pydantic's error reporting.  Every default echoes into the run report, so
no applied value is silent.
"""

from __future__ import annotations

import os
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ScaleRuleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    rule: Literal["fixed", "h", "h_pow"] = "fixed"
    exponent: float = 1.0


class MicrostructureConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)
    kind: Literal["constant-isotropic", "in-plane-laminate", "checkerboard",
                  "smooth-modulated", "x3-graded", "table"]
    lam: float | list[float] | None = Field(default=None, alias="lambda")
    mu: float | list[float] | None = None
    period: float = 1.0
    direction: int = 0
    volume_fraction: float = 0.5
    amplitude: float = 0.5
    layers: list[tuple[float, float]] | None = None
    scale_rule: ScaleRuleConfig = Field(default_factory=ScaleRuleConfig)
    bounds: tuple[float, float] | None = None
    table: str | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "table":
            if self.table is None:
                raise ValueError("table kind needs a 'table' CSV path")
            if not os.path.exists(self.table):
                raise ValueError(f"table CSV not found: {self.table}")
        elif self.kind == "x3-graded":
            if not self.layers:
                raise ValueError("x3-graded kind needs 'layers'")
        elif self.lam is None or self.mu is None:
            raise ValueError(f"kind {self.kind!r} needs 'lambda' and 'mu'")
        if self.bounds is not None and not 0 < self.bounds[0] <= self.bounds[1]:
            raise ValueError("bounds must satisfy 0 < alpha <= beta")
        return self

    def build(self):
        from .microstructure import field_from_descriptor
        desc = {"kind": self.kind, "period": self.period,
                "direction": self.direction,
                "volume_fraction": self.volume_fraction,
                "amplitude": self.amplitude,
                "scale_rule": self.scale_rule.model_dump(),
                "bounds": self.bounds, "layers": self.layers,
                "lambda": self.lam, "mu": self.mu}
        if self.kind == "table":
            desc["table"] = self.table
        return field_from_descriptor(desc)


class MeshConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    delta: float = Field(gt=0)
    nz: int = Field(default=8, ge=2)


class SolverConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    tol: float = Field(default=1e-9, gt=0)
    maxit: int = Field(default=20000, ge=1)


def _strictly_decreasing(name):
    def check(cls, v):
        if any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError(f"{name} must be strictly decreasing")
        if any(x <= 0 for x in v):
            raise ValueError(f"{name} entries must be positive")
        return v
    return check


class EffectiveConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    sample_points: list[tuple[float, float]] = Field(min_length=1)
    r_list: list[float] = Field(min_length=1)
    cauchy_tol: float = Field(default=0.02, gt=0)
    spectral_slack_rel: float = Field(default=0.05, gt=0)

    _dec = field_validator("r_list")(_strictly_decreasing("r_list"))


class PropertiesConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    h: float = Field(default=0.25, gt=0)
    n_random: int = Field(default=20, ge=1)
    exact_rtol: float = Field(default=1e-8, gt=0)
    limit_rtol: float = Field(default=0.05, gt=0)
    fixture_delta: float = Field(default=1 / 16, gt=0)
    fixture_side: int = Field(default=4, ge=3)
    fixture_gap: int = Field(default=3, ge=1)

    @model_validator(mode="after")
    def _gap_positive(self):
        # separated squares must not touch, or the disjointness check is void
        if self.fixture_gap < 1:
            raise ValueError("fixture squares would overlap")
        return self


class GrisoConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    seed: int = 0
    ensemble: int = Field(default=20, ge=1)
    kappa: float = Field(default=12.0, gt=0)
    mollify_radius: float | None = Field(default=None, gt=0)
    grid_n: int = Field(default=12, ge=4)


class PlateLoadConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["zero", "constant"] = "zero"
    value: float = 0.0


class PlateDensityConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    source: Literal["analytic-relaxed", "inline", "records"] = "analytic-relaxed"
    qhat_upper: list[float] | None = None     # 21 upper-triangle entries
    records_path: str | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.source == "inline" and (self.qhat_upper is None
                                        or len(self.qhat_upper) != 21):
            raise ValueError("inline density needs 21 upper-triangle entries")
        if self.source == "records":
            if self.records_path is None:
                raise ValueError("records density needs 'records_path'")
            if not os.path.exists(self.records_path):
                raise ValueError(f"density records not found: {self.records_path}")
        return self


class PlateConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    mode: Literal["free-gauged", "clamped"] = "clamped"
    n1: int = Field(default=16, ge=2)
    n2: int = Field(default=16, ge=2)
    delta: float = Field(default=1 / 16, gt=0)
    load: PlateLoadConfig = Field(default_factory=PlateLoadConfig)
    density: PlateDensityConfig = Field(default_factory=PlateDensityConfig)
    tol: float = Field(default=1e-8, gt=0)
    maxit: int = Field(default=200, ge=1)
    invariance_check: bool = False
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.invariance_check and self.mode == "clamped":
            raise ValueError("invariance_check is incompatible with clamped "
                             "boundary data; use free-gauged mode")
        return self


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    microstructure: MicrostructureConfig
    omega: tuple[tuple[float, float], tuple[float, float]] | None = None
    h_list: list[float] = Field(default=[0.25, 0.125, 0.0625], min_length=3)
    mesh: MeshConfig = Field(default_factory=lambda: MeshConfig(delta=1 / 32))
    solver: SolverConfig = Field(default_factory=SolverConfig)
    effective: Optional[EffectiveConfig] = None
    properties: Optional[PropertiesConfig] = None
    griso: Optional[GrisoConfig] = None
    plate: Optional[PlateConfig] = None
    output_dir: str = "out"
    seed: int = 0
    jobs: int = Field(default=0, ge=0)   # 0: take VKHOMOG_JOBS or 1

    _dec = field_validator("h_list")(_strictly_decreasing("h_list"))

    def require(self, name: str):
        block = getattr(self, name)
        if block is None:
            raise ValueError(f"config is missing the '{name}' block")
        return block

    def build_field(self):
        fld = self.microstructure.build()
        fld.omega = self.omega
        return fld

    def resolved_jobs(self) -> int:
        if self.jobs > 0:
            return self.jobs
        env = os.environ.get("VKHOMOG_JOBS", "")
        try:
            return max(1, int(env))
        except ValueError:
            return 1
