from typing import Optional, Sequence, Tuple
import logging
import math
import struct

import numpy as np

from app.configs.wire_constants import WireConstants
from app.custom_error import DecodeError, InvalidArgumentError
from app.models.stream_models import SUM, ReductionOp, SparseStream, StreamRepr, ValuePrecision
from app.services import quantization_services

logger = logging.getLogger(__name__)


# =====================================================================================================
# CONSTRUCTION
# =====================================================================================================


def switch_threshold(N: int, isize: int, c: int = WireConstants.INDEX_BYTES, scale: float = 1.0) -> int:
    """Largest nnz for which the sparse encoding is not bigger than the dense one"""
    if N <= 0:
        raise InvalidArgumentError(f"dimension must be positive, got {N}")
    if isize not in (4, 8):
        raise InvalidArgumentError(f"value size must be 4 or 8 bytes, got {isize}")
    if c < math.ceil(math.log2(N) / 8):
        raise InvalidArgumentError(f"{c} index bytes cannot address a universe of {N}")
    if not 0.0 < scale <= 1.0:
        raise InvalidArgumentError(f"threshold scale must lie in (0, 1], got {scale}")
    return int(math.floor(N * isize * scale / (c + isize)))


def default_threshold(N: int, precision: ValuePrecision) -> int:
    return switch_threshold(N, precision.isize, WireConstants.INDEX_BYTES)


def empty_stream(N: int, precision: ValuePrecision = ValuePrecision.F32) -> SparseStream:
    return SparseStream(
        dimension=N,
        repr=StreamRepr.SPARSE,
        indices=np.empty(0, dtype=np.uint32),
        values=np.empty(0, dtype=precision.dtype),
        precision=precision,
    )


def from_pairs(
    N: int,
    indices,
    values,
    precision: ValuePrecision = ValuePrecision.F32,
    threshold: Optional[int] = None,
    op: ReductionOp = SUM,
) -> SparseStream:
    """Build a stream from (possibly unsorted, duplicate-free) pairs, densifying past the threshold"""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    vals = np.asarray(values, dtype=precision.dtype).ravel()
    if idx.shape[0] != vals.shape[0]:
        raise InvalidArgumentError("index and value counts differ")
    if idx.shape[0] and (idx.min() < 0 or idx.max() >= N):
        raise InvalidArgumentError(f"indices must lie in [0, {N})")

    order = np.argsort(idx, kind="stable")
    idx, vals = idx[order], vals[order]
    if idx.shape[0] > 1 and np.any(np.diff(idx) == 0):
        raise InvalidArgumentError("duplicate indices in sparse input")

    stream = SparseStream(dimension=N, repr=StreamRepr.SPARSE, indices=idx.astype(np.uint32), values=vals, precision=precision)
    limit = default_threshold(N, precision) if threshold is None else threshold
    return densify(stream, op) if stream.pair_count > limit else stream


def from_dense(values, precision: ValuePrecision = ValuePrecision.F32) -> SparseStream:
    vals = np.array(values, dtype=precision.dtype).ravel()
    return SparseStream(dimension=vals.shape[0], repr=StreamRepr.DENSE, values=vals, precision=precision)


def densify(u: SparseStream, op: ReductionOp = SUM) -> SparseStream:
    if u.is_dense:
        return u
    buffer = np.full(u.dimension, op.neutral, dtype=u.precision.dtype)
    buffer[u.indices] = u.values
    return SparseStream(dimension=u.dimension, repr=StreamRepr.DENSE, values=buffer, precision=u.precision)


def logical_vector(u: SparseStream, op: ReductionOp = SUM) -> np.ndarray:
    """The full N-vector a stream stands for, neutral where nothing is stored"""
    if u.is_dense:
        return u.values.copy()
    return densify(u, op).values


def non_neutral_count(u: SparseStream, op: ReductionOp = SUM) -> int:
    # same expression for both layouts: dense scans N values, sparse only its stored entries
    return int(np.count_nonzero(u.values != op.neutral))


def compact(u: SparseStream, op: ReductionOp = SUM) -> SparseStream:
    """Drop explicit neutral entries of a sparse stream (merges keep them unless this is called)"""
    if u.is_dense:
        return u
    keep = u.values != op.neutral
    return SparseStream(dimension=u.dimension, repr=StreamRepr.SPARSE, indices=u.indices[keep], values=u.values[keep], precision=u.precision)


# =====================================================================================================
# REDUCTION
# =====================================================================================================


def _check_compatible(u1: SparseStream, u2: SparseStream) -> None:
    if u1.dimension != u2.dimension:
        raise InvalidArgumentError(f"dimension mismatch: {u1.dimension} vs {u2.dimension}")
    if u1.precision is not u2.precision:
        raise InvalidArgumentError(f"precision mismatch: {u1.precision.value} vs {u2.precision.value}")


def sum_inplace(u1: SparseStream, u2: SparseStream, op: ReductionOp = SUM, threshold: Optional[int] = None) -> SparseStream:
    """
    Coordinate-wise op(u1, u2). Dense operands are reused as the output buffer, so callers must not
    rely on either input afterwards. Two sparse inputs whose combined count exceeds the threshold
    produce a dense result; the exact union size is never computed.
    """
    _check_compatible(u1, u2)
    limit = default_threshold(u1.dimension, u1.precision) if threshold is None else threshold

    if u1.is_dense and u2.is_dense:
        op.apply(u1.values, u2.values, out=u1.values)
        return u1

    if u1.is_dense:
        u1.values[u2.indices] = op.apply(u1.values[u2.indices], u2.values)
        return u1

    if u2.is_dense:
        u2.values[u1.indices] = op.apply(u1.values, u2.values[u1.indices])
        return u2

    if u1.pair_count + u2.pair_count > limit:
        dense = densify(u1, op)
        dense.values[u2.indices] = op.apply(dense.values[u2.indices], u2.values)
        return dense

    if u2.pair_count == 0:
        return u1
    if u1.pair_count == 0:
        return u2

    # linear merge over sorted indices; overlapping coordinates are combined, zeros are kept
    merged = np.union1d(u1.indices, u2.indices).astype(np.uint32)
    out = np.full(merged.shape[0], op.neutral, dtype=u1.precision.dtype)
    pos1 = np.searchsorted(merged, u1.indices)
    pos2 = np.searchsorted(merged, u2.indices)
    out[pos1] = u1.values
    out[pos2] = op.apply(out[pos2], u2.values)
    return SparseStream(dimension=u1.dimension, repr=StreamRepr.SPARSE, indices=merged, values=out, precision=u1.precision)


def concat_disjoint(
    parts: Sequence[SparseStream],
    ranges: Sequence[Tuple[int, int]],
    op: ReductionOp = SUM,
    threshold: Optional[int] = None,
) -> SparseStream:
    """
    Sum of streams whose content lies in pairwise disjoint index ranges, done by concatenation.
    A dense part only contributes the values inside its declared range.
    """
    if len(parts) != len(ranges):
        raise InvalidArgumentError("every part needs exactly one declared range")
    if not parts:
        raise InvalidArgumentError("nothing to concatenate")

    N = parts[0].dimension
    precision = parts[0].precision
    order = sorted(range(len(parts)), key=lambda i: ranges[i][0])
    previous_stop = 0
    for i in order:
        lo, hi = ranges[i]
        part = parts[i]
        if part.dimension != N or part.precision is not precision:
            raise InvalidArgumentError("parts disagree on dimension or precision")
        if lo < 0 or hi > N or lo > hi:
            raise InvalidArgumentError(f"invalid range [{lo}, {hi}) for dimension {N}")
        if lo < previous_stop:
            raise InvalidArgumentError(f"range [{lo}, {hi}) overlaps a previous range")
        previous_stop = hi
        if not part.is_dense and part.pair_count:
            if int(part.indices[0]) < lo or int(part.indices[-1]) >= hi:
                raise InvalidArgumentError(f"part entries fall outside their declared range [{lo}, {hi})")

    limit = default_threshold(N, precision) if threshold is None else threshold
    total = sum(parts[i].nnz if not parts[i].is_dense else ranges[i][1] - ranges[i][0] for i in order)
    any_dense = any(parts[i].is_dense for i in order)

    if any_dense or total > limit:
        buffer = np.full(N, op.neutral, dtype=precision.dtype)
        for i in order:
            lo, hi = ranges[i]
            part = parts[i]
            if part.is_dense:
                buffer[lo:hi] = part.values[lo:hi]
            else:
                buffer[part.indices] = part.values
        return SparseStream(dimension=N, repr=StreamRepr.DENSE, values=buffer, precision=precision)

    indices = np.concatenate([parts[i].indices for i in order]).astype(np.uint32)
    values = np.concatenate([parts[i].values for i in order]).astype(precision.dtype)
    return SparseStream(dimension=N, repr=StreamRepr.SPARSE, indices=indices, values=values, precision=precision)


def restrict(u: SparseStream, lo: int, hi: int) -> SparseStream:
    """Entries of a sparse stream inside [lo, hi), still in global coordinates; dense streams pass through"""
    if u.is_dense:
        return u
    start, stop = np.searchsorted(u.indices, [lo, hi])
    return SparseStream(
        dimension=u.dimension, repr=StreamRepr.SPARSE, indices=u.indices[start:stop], values=u.values[start:stop], precision=u.precision
    )


def window(u: SparseStream, lo: int, hi: int, op: ReductionOp = SUM, scale: float = 1.0) -> SparseStream:
    """
    Re-express the [lo, hi) part of a stream in local coordinates (dimension hi - lo) for transmission.
    A sparse window that outgrows the threshold of its own dimension is sent dense.
    """
    width = hi - lo
    if width <= 0:
        raise InvalidArgumentError(f"empty window [{lo}, {hi})")
    if u.is_dense:
        return SparseStream(dimension=width, repr=StreamRepr.DENSE, values=u.values[lo:hi].copy(), precision=u.precision)

    part = restrict(u, lo, hi)
    local = SparseStream(
        dimension=width,
        repr=StreamRepr.SPARSE,
        indices=(part.indices.astype(np.int64) - lo).astype(np.uint32),
        values=part.values.copy(),
        precision=u.precision,
    )
    limit = switch_threshold(width, u.precision.isize, WireConstants.INDEX_BYTES, scale)
    return densify(local, op) if local.pair_count > limit else local


def place(u: SparseStream, lo: int, N: int, op: ReductionOp = SUM) -> SparseStream:
    """Inverse of window(): lift a local stream back into the global universe of size N"""
    if lo < 0 or lo + u.dimension > N:
        raise InvalidArgumentError(f"window of {u.dimension} at offset {lo} does not fit in {N}")
    if u.is_dense:
        buffer = np.full(N, op.neutral, dtype=u.precision.dtype)
        buffer[lo : lo + u.dimension] = u.values
        return SparseStream(dimension=N, repr=StreamRepr.DENSE, values=buffer, precision=u.precision)
    return SparseStream(
        dimension=N,
        repr=StreamRepr.SPARSE,
        indices=(u.indices.astype(np.int64) + lo).astype(np.uint32),
        values=u.values,
        precision=u.precision,
    )


# =====================================================================================================
# WIRE FORMAT
# =====================================================================================================

_HEADER = struct.Struct("<BI")
_COUNT = struct.Struct("<I")


def encoded_size(u: SparseStream) -> int:
    if u.is_dense:
        return WireConstants.STREAM_HEADER_BYTES + u.dimension * u.precision.isize
    return WireConstants.STREAM_HEADER_BYTES + WireConstants.SPARSE_COUNT_BYTES + u.pair_count * (WireConstants.INDEX_BYTES + u.precision.isize)


def serialize(u: SparseStream) -> bytes:
    if u.is_dense:
        return _HEADER.pack(WireConstants.FLAG_DENSE, u.dimension) + u.values.astype(u.precision.dtype, copy=False).tobytes()

    pairs = np.empty(u.pair_count, dtype=[("index", "<u4"), ("value", u.precision.dtype)])
    pairs["index"] = u.indices
    pairs["value"] = u.values
    return _HEADER.pack(WireConstants.FLAG_SPARSE, u.dimension) + _COUNT.pack(u.pair_count) + pairs.tobytes()


def payload_length(payload: bytes, offset: int = 0, precision: ValuePrecision = ValuePrecision.F32) -> int:
    """Byte length of the encoded stream starting at `offset`; every encoding is self-delimiting"""
    if len(payload) - offset < _HEADER.size:
        raise DecodeError("truncated stream header")
    flag, N = _HEADER.unpack_from(payload, offset)
    if flag == WireConstants.FLAG_DENSE:
        return _HEADER.size + N * precision.isize
    if flag == WireConstants.FLAG_SPARSE:
        if len(payload) - offset < _HEADER.size + _COUNT.size:
            raise DecodeError("truncated sparse entry count")
        (count,) = _COUNT.unpack_from(payload, offset + _HEADER.size)
        return _HEADER.size + _COUNT.size + count * (WireConstants.INDEX_BYTES + precision.isize)
    if flag == WireConstants.FLAG_QUANTIZED:
        return quantization_services.record_length(payload, offset)
    raise DecodeError(f"unknown representation flag 0x{flag:02x}")


def payload_volume(payload: bytes, precision: ValuePrecision = ValuePrecision.F32) -> Tuple[int, int]:
    """
    (index-value pairs, dense words) carried by one encoded stream, as charged by the cost model.
    Quantized payloads are charged as the number of full-precision words their bytes occupy.
    """
    if not payload:
        return 0, 0
    flag, N = _HEADER.unpack_from(payload, 0)
    if flag == WireConstants.FLAG_SPARSE:
        (count,) = _COUNT.unpack_from(payload, _HEADER.size)
        return int(count), 0
    if flag == WireConstants.FLAG_DENSE:
        return 0, int(N)
    if flag == WireConstants.FLAG_QUANTIZED:
        return 0, math.ceil(len(payload) / precision.isize)
    raise DecodeError(f"unknown representation flag 0x{flag:02x}")


def deserialize(payload: bytes, precision: ValuePrecision = ValuePrecision.F32) -> SparseStream:
    """Decode a sparse, dense or quantized-dense payload; quantized payloads come back as dense streams"""
    if len(payload) < _HEADER.size:
        raise DecodeError(f"truncated stream header ({len(payload)} bytes)")
    flag, N = _HEADER.unpack_from(payload, 0)
    if N == 0:
        raise DecodeError("stream dimension must be positive")

    if flag == WireConstants.FLAG_DENSE:
        expected = _HEADER.size + N * precision.isize
        if len(payload) != expected:
            raise DecodeError(f"dense payload of {len(payload)} bytes, expected {expected}")
        values = np.frombuffer(payload, dtype=precision.dtype, count=N, offset=_HEADER.size).copy()
        return SparseStream(dimension=N, repr=StreamRepr.DENSE, values=values, precision=precision)

    if flag == WireConstants.FLAG_SPARSE:
        if len(payload) < _HEADER.size + _COUNT.size:
            raise DecodeError("truncated sparse entry count")
        (count,) = _COUNT.unpack_from(payload, _HEADER.size)
        expected = _HEADER.size + _COUNT.size + count * (WireConstants.INDEX_BYTES + precision.isize)
        if len(payload) != expected:
            raise DecodeError(f"sparse payload of {len(payload)} bytes, expected {expected}")
        pairs = np.frombuffer(payload, dtype=[("index", "<u4"), ("value", precision.dtype)], count=count, offset=_HEADER.size + _COUNT.size)
        indices = pairs["index"].astype(np.uint32)
        if count and int(indices.max()) >= N:
            raise DecodeError(f"index {int(indices.max())} outside universe of {N}")
        if count > 1 and np.any(np.diff(indices.astype(np.int64)) <= 0):
            raise DecodeError("sparse indices are not strictly increasing")
        values = pairs["value"].astype(precision.dtype)
        return SparseStream(dimension=N, repr=StreamRepr.SPARSE, indices=indices, values=values, precision=precision)

    if flag == WireConstants.FLAG_QUANTIZED:
        blocks, scheme, n = quantization_services.decode_blocks(payload)
        values = quantization_services.dequantize(blocks, scheme, n).astype(precision.dtype)
        return SparseStream(dimension=n, repr=StreamRepr.DENSE, values=values, precision=precision)

    raise DecodeError(f"unknown representation flag 0x{flag:02x}")
