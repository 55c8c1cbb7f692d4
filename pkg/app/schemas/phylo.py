"""Pydantic v2 models for model configuration, chains and comparison reports."""
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.schemas.evidence import EstimatorMethod, EvidenceEstimate


class ModelKind(str, Enum):
    JC69 = "jc69"
    GTR = "gtr"
    GTR_GAMMA = "gtr-gamma"

    @property
    def has_frequencies(self) -> bool:
        return self is not ModelKind.JC69

    @property
    def has_gamma(self) -> bool:
        return self is ModelKind.GTR_GAMMA


# ── Model configuration ───────────────────────────────────────────────────────

class SubstitutionModelSpec(BaseModel):
    """Config-file form of a substitution model (nucleotide order A, C, G, T)."""

    kind: ModelKind
    pi: Optional[list[float]] = Field(default=None, min_length=4, max_length=4)
    rho: Optional[list[float]] = Field(default=None, min_length=6, max_length=6)
    alpha: Optional[float] = Field(default=None, gt=0.0)
    n_categories: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_gamma(self) -> "SubstitutionModelSpec":
        if (self.alpha is not None) != (self.n_categories > 1):
            raise ValueError("alpha must be given exactly when n_categories > 1")
        return self


class PriorSpec(BaseModel):
    """Exponential priors on branch lengths and alpha, flat Dirichlet on simplices."""

    branch_length_rate: float = Field(default=10.0, gt=0.0)
    alpha_rate: float = Field(default=1.0, gt=0.0)
    pi_concentration: list[float] = Field(default=[1.0] * 4, min_length=4, max_length=4)
    rho_concentration: list[float] = Field(default=[1.0] * 6, min_length=6, max_length=6)

    @field_validator("pi_concentration", "rho_concentration")
    @classmethod
    def _positive(cls, value: list[float]) -> list[float]:
        if any(v <= 0 for v in value):
            raise ValueError("Dirichlet concentrations must be positive")
        return value


# ── Chains ────────────────────────────────────────────────────────────────────

class ChainMetadata(BaseModel):
    """JSON sidecar stored next to a chain CSV."""

    model_kind: ModelKind
    columns: list[str]
    packing_version: str
    seed: int
    priors: PriorSpec
    n_categories: int = 1
    acceptance_rate: float = Field(ge=0.0, le=1.0)
    draws: int
    burn_in: int
    thin: int
    proposal_scales: list[float] = Field(default_factory=list)
    tree_newick: Optional[str] = None
    data_fingerprint: Optional[str] = None


# ── Comparison ────────────────────────────────────────────────────────────────

class ReplicateInterval(BaseModel):
    log_bf_mean: float
    sd_pairings: float = Field(ge=0.0, description="SD over all R x R pairings")
    sd_replicates: float = Field(ge=0.0, description="SD over R replicate-wise differences")
    ci_low: float
    ci_high: float
    n_pairings: int


class BayesFactorReport(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    log_bf: float
    method: EstimatorMethod
    category: str
    favors: str
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    per_model: list[EvidenceEstimate] = Field(min_length=2, max_length=2)
    labels: list[str] = Field(default=["M0", "M1"], min_length=2, max_length=2)
    replicate_matrix: Optional[list[list[float]]] = None
    interval: Optional[ReplicateInterval] = None

    @model_validator(mode="after")
    def _check_difference(self) -> "BayesFactorReport":
        expected = self.per_model[1].log_c - self.per_model[0].log_c
        if abs(self.log_bf - expected) > 1e-12 * max(1.0, abs(expected)):
            raise ValueError("log_bf must equal the difference of the log evidences")
        if self.ci_low is not None and self.ci_high is not None:
            if not (self.ci_low <= self.log_bf <= self.ci_high):
                raise ValueError("interval must bracket log_bf")
        return self


class BayesFactorRequest(BaseModel):
    """Two evidence estimates from the same method on the same data."""

    m0: EvidenceEstimate
    m1: EvidenceEstimate
    labels: list[str] = Field(default=["M0", "M1"], min_length=2, max_length=2)
    fingerprint0: Optional[str] = None
    fingerprint1: Optional[str] = None
    replicate_log_c0: Optional[list[float]] = Field(default=None, min_length=2)
    replicate_log_c1: Optional[list[float]] = Field(default=None, min_length=2)


class TopologyEvidence(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    index: int
    newick: str
    log_evidence: Optional[float] = None
    estimate: Optional[EvidenceEstimate] = None
    replicate_log_evidence: list[float] = Field(default_factory=list)
    posterior_probability: Optional[float] = None
    rank: Optional[int] = None
    error: Optional[str] = None


class PairwiseBayesFactor(BaseModel):
    i: int
    j: int
    log_bf: float
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None


class TreeSelectionReport(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    method: EstimatorMethod
    model_kind: ModelKind
    topologies: list[TopologyEvidence]
    pairwise: list[PairwiseBayesFactor] = Field(default_factory=list)

    @property
    def complete(self) -> bool:
        return all(t.error is None for t in self.topologies)
