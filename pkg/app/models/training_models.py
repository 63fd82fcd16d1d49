from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import List, Literal, Optional
from enum import Enum
import numpy as np
from scipy.sparse import csr_matrix

from app.configs.app_settings import settings
from app.models.collective_models import CollectiveAlgorithm
from app.models.stream_models import SparseStream, ValuePrecision
from app.models.transport_models import BackendKind


class LossKind(str, Enum):
    LOGISTIC = "logistic"
    HINGE = "hinge"


class ScheduleKind(str, Enum):
    CONSTANT = "constant"
    INVERSE_DECAY = "inverse_decay"


class LearningRateSchedule(BaseModel):
    kind: ScheduleKind = ScheduleKind.INVERSE_DECAY
    initial: float = Field(default=0.1, gt=0.0)
    decay_steps: float = Field(default=100.0, gt=0.0)

    def rate(self, step: int) -> float:
        if self.kind is ScheduleKind.CONSTANT:
            return self.initial
        return self.initial / (1.0 + step / self.decay_steps)


# -------------------------------------------------------------------------------------------
# data


class Dataset(BaseModel):
    """Sparse feature rows with labels in {-1, +1}"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: csr_matrix
    labels: np.ndarray
    name: str = "synthetic"

    @property
    def num_rows(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]


# -------------------------------------------------------------------------------------------
# per-rank state


class TopKSelection(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    selected: SparseStream
    residual: np.ndarray
    count: int  # coordinates chosen, whatever representation `selected` ended up in


class TopKState(BaseModel):
    """Residual and model of one rank; both start at zero"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    residual: np.ndarray
    model: np.ndarray
    schedule: LearningRateSchedule = LearningRateSchedule()
    # None communicates the whole accumulated gradient (no selection)
    topk_per_bucket: Optional[int] = Field(default=None, ge=1)
    bucket_size: int = Field(default=settings.TOPK_BUCKET_SIZE, ge=1)
    precision: ValuePrecision = ValuePrecision.F32
    step: int = 0
    last_selected_count: int = 0

    @classmethod
    def initial(
        cls,
        N: int,
        schedule: LearningRateSchedule,
        topk_per_bucket: Optional[int],
        bucket_size: int = settings.TOPK_BUCKET_SIZE,
        precision: ValuePrecision = ValuePrecision.F32,
    ) -> "TopKState":
        return cls(
            residual=np.zeros(N, dtype=precision.dtype),
            model=np.zeros(N, dtype=precision.dtype),
            schedule=schedule,
            topk_per_bucket=topk_per_bucket,
            bucket_size=bucket_size,
            precision=precision,
        )


# -------------------------------------------------------------------------------------------
# training runs


class TrainConfig(BaseModel):
    world_size: int = Field(default=settings.WORLD_SIZE, ge=1)
    backend: Optional[BackendKind] = None
    epochs: int = Field(default=10, ge=0)
    batch_size: int = Field(default=16, ge=1)
    loss: LossKind = LossKind.LOGISTIC
    l2: float = Field(default=0.0, ge=0.0)
    schedule: LearningRateSchedule = LearningRateSchedule()
    topk: Optional[int] = Field(default=8, ge=1)
    bucket_size: int = Field(default=settings.TOPK_BUCKET_SIZE, ge=1)
    algorithm: CollectiveAlgorithm = CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE
    quant_bits: Optional[Literal[2, 4, 8]] = None
    quant_bucket_size: int = Field(default=settings.QUANT_BUCKET_SIZE, ge=1)
    # divide the summed update by P (off: updates are summed over ranks)
    average: bool = False
    precision: ValuePrecision = ValuePrecision.F32
    seed: int = 0

    @model_validator(mode="after")
    def _check_combination(self) -> "TrainConfig":
        if self.topk is not None and self.topk > self.bucket_size:
            raise ValueError("topk cannot exceed the bucket size")
        if self.quant_bits is not None and self.algorithm is not CollectiveAlgorithm.DSAR_SPLIT_ALLGATHER:
            raise ValueError("quantization is only applied in the dense phase of dsar_split_allgather")
        return self


class EpochMetrics(BaseModel):
    epoch: int
    rank: int
    loss: float
    accuracy: float
    bytes_sent: int
    mean_selected_density: float


class TrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    metrics: List[EpochMetrics]
    # per epoch, row-weighted mean of the rank losses
    global_loss: List[float]
    total_bytes: int
    final_model: np.ndarray
