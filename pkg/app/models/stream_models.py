from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Optional
from enum import Enum
import numpy as np

from app.configs.wire_constants import WireConstants


class ValuePrecision(str, Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> np.dtype:
        # wire values are little-endian IEEE-754
        return np.dtype("<f4") if self is ValuePrecision.F32 else np.dtype("<f8")

    @property
    def isize(self) -> int:
        return 4 if self is ValuePrecision.F32 else 8


class StreamRepr(str, Enum):
    SPARSE = "sparse"
    DENSE = "dense"


class ReductionKind(str, Enum):
    SUM = "sum"
    MAX = "max"
    MIN = "min"
    PROD = "prod"


_REDUCTION_TABLE = {
    ReductionKind.SUM: (np.add, 0.0),
    ReductionKind.MAX: (np.maximum, -np.inf),
    ReductionKind.MIN: (np.minimum, np.inf),
    ReductionKind.PROD: (np.multiply, 1.0),
}


class ReductionOp(BaseModel):
    """Associative coordinate-wise operation together with its neutral element"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: ReductionKind
    ufunc: np.ufunc
    neutral: float

    @classmethod
    def of(cls, kind: ReductionKind) -> "ReductionOp":
        ufunc, neutral = _REDUCTION_TABLE[ReductionKind(kind)]
        return cls(kind=kind, ufunc=ufunc, neutral=neutral)

    def apply(self, left, right, out=None):
        if out is None:
            return self.ufunc(left, right)
        return self.ufunc(left, right, out=out)


SUM = ReductionOp.of(ReductionKind.SUM)
MAX = ReductionOp.of(ReductionKind.MAX)
MIN = ReductionOp.of(ReductionKind.MIN)
PROD = ReductionOp.of(ReductionKind.PROD)


# -------------------------------------------------------------------------------------------
# streams


class SparseStream(BaseModel):
    """
    Tagged sparse-or-dense vector over a universe of `dimension` coordinates.
    Sparse streams keep strictly increasing u32 indices; dense streams store exactly `dimension` values.
    Coordinates not listed in a sparse stream hold the neutral element of whatever op reduces them.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    dimension: int = Field(gt=0, le=WireConstants.MAX_DIMENSION)
    repr: StreamRepr
    values: np.ndarray
    indices: Optional[np.ndarray] = None
    precision: ValuePrecision = ValuePrecision.F32

    @model_validator(mode="after")
    def _check_layout(self) -> "SparseStream":
        if self.values.ndim != 1:
            raise ValueError("values must be one-dimensional")
        if self.values.dtype != self.precision.dtype:
            raise ValueError(f"values dtype {self.values.dtype} does not match precision {self.precision.value}")

        if self.repr is StreamRepr.DENSE:
            if self.indices is not None:
                raise ValueError("dense stream cannot carry indices")
            if self.values.shape[0] != self.dimension:
                raise ValueError(f"dense stream must store {self.dimension} values, got {self.values.shape[0]}")
            return self

        if self.indices is None or self.indices.ndim != 1 or self.indices.dtype != np.uint32:
            raise ValueError("sparse stream needs a one-dimensional uint32 index array")
        if self.indices.shape[0] != self.values.shape[0]:
            raise ValueError("sparse stream index and value counts differ")
        if self.indices.shape[0]:
            if int(self.indices[-1]) >= self.dimension:
                raise ValueError("sparse index outside the universe")
            if np.any(np.diff(self.indices.astype(np.int64)) <= 0):
                raise ValueError("sparse indices must be strictly increasing")
        return self

    @property
    def is_dense(self) -> bool:
        return self.repr is StreamRepr.DENSE

    @property
    def nnz(self) -> int:
        """Stored entries: explicit pairs for sparse streams, the full dimension for dense ones"""
        return self.dimension if self.is_dense else int(self.indices.shape[0])

    @property
    def pair_count(self) -> int:
        return 0 if self.is_dense else int(self.indices.shape[0])

    @property
    def dense_count(self) -> int:
        return self.dimension if self.is_dense else 0

    def copy(self) -> "SparseStream":
        return SparseStream(
            dimension=self.dimension,
            repr=self.repr,
            values=self.values.copy(),
            indices=None if self.indices is None else self.indices.copy(),
            precision=self.precision,
        )
