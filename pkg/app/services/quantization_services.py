from typing import List, Optional, Tuple
import logging
import math
import struct

import numpy as np

from app.configs.wire_constants import WireConstants
from app.custom_error import DecodeError, InvalidArgumentError
from app.models.quantization_models import QuantizationScheme, QuantizedBlock

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<BIBI")
_SCALE = struct.Struct("<f")
_F32_MAX = float(np.finfo(np.float32).max)


def _packed_length(length: int, bits: int) -> int:
    return math.ceil(length * bits / 8)


def _pack_codes(codes: np.ndarray, bits: int) -> bytes:
    # first entry in the least significant bits of the first byte
    bit_matrix = np.unpackbits(codes.astype(np.uint8)[:, None], axis=1, bitorder="little")[:, :bits]
    return np.packbits(bit_matrix.ravel(), bitorder="little").tobytes()


def _unpack_codes(packed: bytes, length: int, bits: int) -> np.ndarray:
    bit_stream = np.unpackbits(np.frombuffer(packed, dtype=np.uint8), bitorder="little", count=length * bits)
    weights = (1 << np.arange(bits, dtype=np.uint16)).astype(np.uint16)
    return (bit_stream.reshape(length, bits).astype(np.uint16) @ weights).astype(np.uint16)


# =====================================================================================================
# ENCODE / DECODE
# =====================================================================================================


def _scale_of(magnitude: np.ndarray) -> float:
    # the float32 scale must not fall below the bucket maximum, or codes would clip
    peak = float(magnitude.max())
    scale = np.float32(peak)
    if float(scale) < peak:
        scale = np.nextafter(scale, np.float32(np.inf))
    return float(scale)


def quantize(values, scheme: QuantizationScheme, rng: Optional[np.random.Generator] = None) -> List[QuantizedBlock]:
    """
    Bucketed stochastic quantization: per bucket the scale is the max magnitude and each entry is
    rounded stochastically to one of `levels` uniform magnitudes, so the decoded value is unbiased.
    """
    data = np.asarray(values, dtype=np.float64).ravel()
    if data.shape[0] == 0:
        raise InvalidArgumentError("cannot quantize an empty vector")
    if not np.all(np.isfinite(data)):
        raise InvalidArgumentError("cannot quantize non-finite values")
    if np.abs(data).max() > _F32_MAX:
        raise InvalidArgumentError("cannot quantize magnitudes beyond the float32 range")

    generator = rng if rng is not None else np.random.default_rng(scheme.seed)
    s = scheme.levels
    sign_bit = 1 << (scheme.bits - 1)
    blocks: List[QuantizedBlock] = []

    for start in range(0, data.shape[0], scheme.bucket_size):
        bucket = data[start : start + scheme.bucket_size]
        magnitude = np.abs(bucket)
        scale = _scale_of(magnitude)
        draws = generator.random(bucket.shape[0])

        if scale == 0.0:
            codes = np.zeros(bucket.shape[0], dtype=np.uint8)
        else:
            scaled = np.minimum(magnitude / scale * s, s)
            floor = np.floor(scaled)
            levels = np.minimum(floor + (draws < (scaled - floor)), s).astype(np.uint8)
            codes = levels | np.where((bucket < 0) & (levels > 0), sign_bit, 0).astype(np.uint8)

        blocks.append(QuantizedBlock(scale=scale, codes=_pack_codes(codes, scheme.bits), length=bucket.shape[0]))
    return blocks


def dequantize(blocks: List[QuantizedBlock], scheme: QuantizationScheme, n: int) -> np.ndarray:
    """Deterministic decode: sign * (level / levels) * scale, returned as float32"""
    total = sum(block.length for block in blocks)
    if total != n:
        raise DecodeError(f"blocks hold {total} entries, expected {n}")

    s = scheme.levels
    sign_bit = 1 << (scheme.bits - 1)
    out = np.empty(n, dtype=np.float32)
    offset = 0
    for block in blocks:
        if len(block.codes) != _packed_length(block.length, scheme.bits):
            raise DecodeError("packed code length does not match bucket length")
        codes = _unpack_codes(block.codes, block.length, scheme.bits)
        levels = (codes & (sign_bit - 1)).astype(np.float32)
        signs = np.where(codes & sign_bit, np.float32(-1.0), np.float32(1.0))
        out[offset : offset + block.length] = signs * (levels / np.float32(s)) * np.float32(block.scale)
        offset += block.length
    return out


def encoded_size(n: int, scheme: QuantizationScheme) -> int:
    """Exact wire size of n quantized values"""
    num_buckets = math.ceil(n / scheme.bucket_size)
    full, tail = divmod(n, scheme.bucket_size)
    packed = full * _packed_length(scheme.bucket_size, scheme.bits) + (_packed_length(tail, scheme.bits) if tail else 0)
    return WireConstants.QUANTIZED_HEADER_BYTES + num_buckets * WireConstants.SCALE_BYTES + packed


def encode_blocks(blocks: List[QuantizedBlock], scheme: QuantizationScheme, n: int) -> bytes:
    parts = [_HEADER.pack(WireConstants.FLAG_QUANTIZED, n, scheme.bits, scheme.bucket_size)]
    for block in blocks:
        parts.append(_SCALE.pack(block.scale))
        parts.append(block.codes)
    return b"".join(parts)


def record_length(payload: bytes, offset: int = 0) -> int:
    """Byte length of the quantized record starting at `offset` (records are self-delimiting)"""
    if len(payload) - offset < _HEADER.size:
        raise DecodeError("truncated quantized header")
    flag, n, bits, bucket_size = _HEADER.unpack_from(payload, offset)
    if flag != WireConstants.FLAG_QUANTIZED:
        raise DecodeError(f"expected quantized flag, found 0x{flag:02x}")
    if bits not in (2, 4, 8) or bucket_size == 0:
        raise DecodeError(f"invalid quantization header (bits={bits}, bucket={bucket_size})")
    return encoded_size(n, QuantizationScheme(bits=bits, bucket_size=bucket_size))


def decode_blocks(payload: bytes, offset: int = 0) -> Tuple[List[QuantizedBlock], QuantizationScheme, int]:
    size = record_length(payload, offset)
    if len(payload) - offset < size:
        raise DecodeError(f"quantized payload truncated: {len(payload) - offset} of {size} bytes")
    _, n, bits, bucket_size = _HEADER.unpack_from(payload, offset)
    scheme = QuantizationScheme(bits=bits, bucket_size=bucket_size)

    blocks: List[QuantizedBlock] = []
    cursor = offset + _HEADER.size
    remaining = n
    while remaining > 0:
        length = min(bucket_size, remaining)
        (scale,) = _SCALE.unpack_from(payload, cursor)
        cursor += _SCALE.size
        packed = _packed_length(length, bits)
        blocks.append(QuantizedBlock(scale=scale, codes=bytes(payload[cursor : cursor + packed]), length=length))
        cursor += packed
        remaining -= length
    return blocks, scheme, n
