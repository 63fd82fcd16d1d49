from pydantic import BaseModel, Field, field_validator
from typing import List, Literal, Optional
from enum import Enum

from app.configs.app_settings import settings
from app.models.collective_models import CONCRETE_ALGORITHMS, CollectiveAlgorithm
from app.models.training_models import LearningRateSchedule, LossKind
from app.models.transport_models import BackendKind


class RunCommand(str, Enum):
    BENCH = "bench"
    DENSITY = "density"
    TRAIN = "train"


class RunStatus(str, Enum):
    OK = "ok"
    BOUND_VIOLATION = "bound-violation"
    INCORRECT = "incorrect"


class RunSpec(BaseModel):
    """One harness invocation: a sweep grid for bench/density, a training description for train"""

    command: RunCommand = RunCommand.BENCH

    # sweep grid
    world_sizes: List[int] = Field(default=[2, 4, 8], min_length=1)
    dimensions: List[int] = Field(default=[4096], min_length=1)
    densities: List[float] = Field(default=[0.01], min_length=1)
    algorithms: List[CollectiveAlgorithm] = Field(default=list(CONCRETE_ALGORITHMS), min_length=1)
    seeds: List[int] = Field(default=[0], min_length=1)
    repetitions: int = Field(default=1, ge=1)
    trials: int = Field(default=2000, ge=1)  # Monte Carlo trials per density grid point

    # cost model
    alpha: float = Field(default=settings.COST_ALPHA, ge=0.0)
    beta_d: float = Field(default=settings.COST_BETA_D, gt=0.0)
    beta_s: float = Field(default=settings.COST_BETA_S, gt=0.0)

    backend: Optional[BackendKind] = None
    output: Optional[str] = None

    # train: data source (a libsvm file, or a synthetic separable problem)
    dataset: Optional[str] = None
    rows: int = Field(default=2000, ge=1)
    features: int = Field(default=1000, ge=2)
    nnz_per_row: int = Field(default=10, ge=1)
    informative: int = Field(default=10, ge=1)

    # train: optimisation
    world_size: int = Field(default=settings.WORLD_SIZE, ge=1)
    algorithm: CollectiveAlgorithm = CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE
    topk: Optional[int] = Field(default=8, ge=1)
    bucket_size: int = Field(default=settings.TOPK_BUCKET_SIZE, ge=1)
    quant_bits: Optional[Literal[2, 4, 8]] = None
    epochs: int = Field(default=10, ge=0)
    batch: int = Field(default=16, ge=1)
    lr: LearningRateSchedule = LearningRateSchedule()
    loss: LossKind = LossKind.LOGISTIC
    l2: float = Field(default=0.0, ge=0.0)
    average: bool = False
    seed: int = 0

    @field_validator("world_sizes", "dimensions")
    @classmethod
    def _positive(cls, values: List[int]) -> List[int]:
        if any(v < 1 for v in values):
            raise ValueError("world sizes and dimensions must be positive")
        return values

    @field_validator("densities")
    @classmethod
    def _positive_density(cls, values: List[float]) -> List[float]:
        if any(not v > 0.0 for v in values):
            raise ValueError("densities must be positive")
        return values


class HarnessResult(BaseModel):
    csv: str
    rows: int
    # False as soon as one correctness check failed
    passed: bool
