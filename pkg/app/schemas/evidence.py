"""Pydantic v2 models for evidence estimates, k-grid tables and reports."""
import math
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

# Relative slack for invariants that are exact in real arithmetic.
_TOL = 1e-12


class EstimatorMethod(str, Enum):
    IDR = "IDR"
    HM = "HM"
    GHM = "GHM"
    AM_PRIOR = "AM_prior"
    AM_POSTERIOR_SURROGATE = "AM_posterior_surrogate"


class EvidenceEstimate(BaseModel):
    """A log-evidence value with its family of relative error estimates."""

    model_config = ConfigDict(ser_json_inf_nan="constants", frozen=True)

    method: EstimatorMethod
    log_c: float = Field(description="Natural-log estimate of the normalizing constant")
    rmse_delta: float = Field(ge=0.0, description="Delta-method relative RMSE with n = T")
    rmse_delta_ess: float = Field(ge=0.0, description="Same, with n replaced by the ESS")
    rmse_boot: Optional[float] = Field(default=None, description="Bootstrap relative RMSE")
    rmse_mc: Optional[float] = Field(default=None, description="Monte Carlo replicate RMSE")
    ci_low: float
    ci_high: float
    k_opt: Optional[float] = Field(default=None, gt=0.0)
    n_draws: int = Field(ge=2)
    ess: float = Field(ge=1.0)
    is_marginal_likelihood: bool = True
    warnings: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_invariants(self) -> "EvidenceEstimate":
        if not (self.ci_low <= self.log_c <= self.ci_high):
            raise ValueError("confidence interval must bracket log_c")
        if self.rmse_delta_ess < self.rmse_delta * (1.0 - _TOL):
            raise ValueError("ESS-corrected rmse cannot be below the uncorrected one")
        for name in ("rmse_boot", "rmse_mc"):
            value = getattr(self, name)
            if value is not None and not (value >= 0.0 or math.isnan(value)):
                raise ValueError(f"{name} must be nonnegative")
        return self


class KGridRow(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants", frozen=True)

    k: float = Field(gt=0.0)
    log_c: float
    rmse_delta: float = Field(ge=0.0)
    rmse_delta_ess: float = Field(ge=0.0)
    ci_low: float
    ci_high: float


class KGridResult(BaseModel):
    """IDR evaluated over an increasing grid of inflation masses."""

    model_config = ConfigDict(ser_json_inf_nan="constants", frozen=True)

    rows: list[KGridRow] = Field(min_length=1)
    selected_index: int = Field(ge=0)
    failed_k: list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_selection(self) -> "KGridResult":
        ks = [row.k for row in self.rows]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("k values must be strictly increasing")
        if self.selected_index >= len(self.rows):
            raise ValueError("selected_index out of range")
        best = self.rows[self.selected_index].rmse_delta_ess
        if any(row.rmse_delta_ess < best for row in self.rows):
            raise ValueError("selected row does not minimize rmse_delta_ess")
        return self

    @property
    def selected(self) -> KGridRow:
        return self.rows[self.selected_index]


class EvidenceReport(BaseModel):
    """Everything `evidence` computes for one chain."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    estimates: list[EvidenceEstimate]
    k_grid: Optional[KGridResult] = None
    n_draws: int
    dimension: int
    ess: float
    columns: list[str] = Field(default_factory=list)
    data_fingerprint: Optional[str] = None
    mc_replicates: int = 1
    replicate_log_c: dict[EstimatorMethod, list[float]] = Field(default_factory=dict)

    def get(self, method: EstimatorMethod) -> EvidenceEstimate | None:
        for estimate in self.estimates:
            if estimate.method == method:
                return estimate
        return None


class ValidationTargetResult(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    name: str
    dimension: int
    true_log_c: float
    log_c: Optional[float] = None
    rmse_delta: Optional[float] = None
    k_opt: Optional[float] = None
    passed: bool
    error: Optional[str] = None


class ValidationReport(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    draws: int
    seed: int
    targets: list[ValidationTargetResult]

    @property
    def passed(self) -> bool:
        return all(target.passed for target in self.targets)
