from pydantic import BaseModel, ConfigDict, Field
from typing import Literal

from app.configs.app_settings import settings


class QuantizationScheme(BaseModel):
    bits: Literal[2, 4, 8] = 4
    bucket_size: int = Field(default=settings.QUANT_BUCKET_SIZE, ge=1)
    seed: int = 0

    @property
    def levels(self) -> int:
        # one bit of the budget carries the sign
        return 2 ** (self.bits - 1) - 1


class QuantizedBlock(BaseModel):
    """One bucket: full-precision scale plus bit-packed sign+magnitude codes"""

    model_config = ConfigDict(frozen=True)

    scale: float = Field(ge=0.0)
    codes: bytes
    length: int = Field(ge=1)
