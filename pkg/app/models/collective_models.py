from pydantic import BaseModel, Field, model_validator
from typing import List, Optional
from enum import Enum

from app.configs.app_settings import settings
from app.models.quantization_models import QuantizationScheme
from app.models.stream_models import ReductionKind, ReductionOp, ValuePrecision


class CollectiveAlgorithm(str, Enum):
    SSAR_RECURSIVE_DOUBLE = "ssar_recursive_double"
    SSAR_SPLIT_ALLGATHER = "ssar_split_allgather"
    DSAR_SPLIT_ALLGATHER = "dsar_split_allgather"
    DENSE_BASELINE = "dense_baseline"
    AUTO = "auto"


CONCRETE_ALGORITHMS = [
    CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE,
    CollectiveAlgorithm.SSAR_SPLIT_ALLGATHER,
    CollectiveAlgorithm.DSAR_SPLIT_ALLGATHER,
    CollectiveAlgorithm.DENSE_BASELINE,
]


class CollectiveConfig(BaseModel):
    algorithm: CollectiveAlgorithm = CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE
    op: ReductionKind = ReductionKind.SUM
    precision: ValuePrecision = ValuePrecision.F32

    # switch threshold parameters: bytes per index and a scale factor shrinking the threshold
    index_bytes: int = Field(default=settings.INDEX_BYTES, ge=1)
    threshold_scale: float = Field(default=settings.THRESHOLD_SCALE, gt=0.0, le=1.0)

    quantize_dense_phase: Optional[QuantizationScheme] = None

    # Auto selection inputs
    expected_nnz: Optional[int] = Field(default=None, ge=0)
    small_message_cutoff_bytes: int = Field(default=settings.SMALL_MESSAGE_CUTOFF_BYTES, ge=0)

    @model_validator(mode="after")
    def _check_combination(self) -> "CollectiveConfig":
        if self.quantize_dense_phase is not None and self.algorithm is not CollectiveAlgorithm.DSAR_SPLIT_ALLGATHER:
            raise ValueError("quantize_dense_phase is only permitted with dsar_split_allgather")
        if self.algorithm is CollectiveAlgorithm.AUTO and self.expected_nnz is None:
            raise ValueError("auto selection needs expected_nnz (estimated per-rank nnz)")
        return self

    @property
    def reduction(self) -> ReductionOp:
        return ReductionOp.of(self.op)


class FoldPlan(BaseModel):
    """Reduction of a world to its largest power-of-two sub-world"""

    world_size: int
    active_size: int
    rank: int
    is_active: bool
    # surplus rank: its delegate; active rank with a surplus: that surplus rank; otherwise None
    partner: Optional[int] = None
    active_ranks: List[int]

    @property
    def is_noop(self) -> bool:
        return self.active_size == self.world_size
