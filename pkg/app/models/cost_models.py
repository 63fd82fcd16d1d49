from pydantic import BaseModel, Field, model_validator
from typing import List

from app.configs.app_settings import settings
from app.custom_error import BoundViolationError


class CostModelParams(BaseModel):
    alpha: float = Field(default=settings.COST_ALPHA, ge=0.0)
    beta_d: float = Field(default=settings.COST_BETA_D, gt=0.0)
    beta_s: float = Field(default=settings.COST_BETA_S, gt=0.0)

    @model_validator(mode="after")
    def _check_betas(self) -> "CostModelParams":
        if not self.beta_s > self.beta_d:
            raise ValueError("beta_s (per sparse pair) must exceed beta_d (per dense word)")
        return self


class ProblemShape(BaseModel):
    P: int = Field(ge=1)
    N: int = Field(ge=1)
    k: int = Field(ge=1)

    @model_validator(mode="after")
    def _check_k(self) -> "ProblemShape":
        if self.k > self.N:
            raise ValueError("k cannot exceed N")
        return self

    @property
    def d(self) -> float:
        return self.k / self.N

    @property
    def total_nnz_range(self) -> tuple:
        """Deterministic range of K (size of the reduced result), ignoring cancellation"""
        return self.k, min(self.N, self.P * self.k)


# -------------------------------------------------------------------------------------------
# predictions


class BoundPrediction(BaseModel):
    algorithm: str
    latency: float
    bandwidth_lower: float
    bandwidth_upper: float
    # bandwidth-optimal dense allreduce reference (two-phase recursive halving / doubling)
    dense_reference: float

    @property
    def lower(self) -> float:
        return self.latency + self.bandwidth_lower

    @property
    def upper(self) -> float:
        return self.latency + self.bandwidth_upper


class DsarLowerBound(BaseModel):
    time: float
    kappa: float
    max_speedup: float


class DensityEstimate(BaseModel):
    mean: float
    stderr: float
    trials: int


# -------------------------------------------------------------------------------------------
# trace validation


class TraceReportRow(BaseModel):
    algorithm: str
    P: int
    N: int
    k: int
    d: float
    stage: str
    messages: int
    pair_volume: int
    dense_volume: int
    predicted_lower: float
    predicted_upper: float
    measured: float


class TraceReport(BaseModel):
    algorithm: str
    lower: float
    upper: float
    measured: float  # critical rank: the maximum per-rank cost
    per_rank_measured: List[float]
    rows: List[TraceReportRow] = []
    violations: List[str] = []

    @property
    def within_bounds(self) -> bool:
        return not self.violations

    def raise_for_violation(self) -> None:
        if self.violations:
            raise BoundViolationError("; ".join(self.violations))
