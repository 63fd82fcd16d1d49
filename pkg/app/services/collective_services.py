from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np

from app.configs.wire_constants import StageLabels
from app.custom_error import DecodeError, InvalidArgumentError, UsageError
from app.models.collective_models import CollectiveAlgorithm, CollectiveConfig, FoldPlan
from app.models.stream_models import SparseStream
from app.services import quantization_services
from app.services.cost_model_services import expected_density_closed_form
from app.services.sparse_stream_services import (
    concat_disjoint,
    densify,
    deserialize,
    empty_stream,
    from_dense,
    logical_vector,
    payload_length,
    payload_volume,
    place,
    serialize,
    sum_inplace,
    switch_threshold,
    window,
)
from app.services.transport_services import Endpoint, OpHandle

logger = logging.getLogger(__name__)

Bounds = List[Tuple[int, int]]

# Every algorithm keeps streams in global coordinates (dimension N). Only the wire sees partition
# windows in local coordinates; they are lifted back with place() before any concatenation.


def partition_bounds(N: int, parts: int) -> Bounds:
    """Ranks 0..parts-2 own floor(N/parts) indices each, the last rank owns the rest"""
    if N < 1 or parts < 1:
        raise InvalidArgumentError(f"cannot partition {N} indices into {parts} parts")
    base = N // parts
    bounds = [(i * base, (i + 1) * base) for i in range(parts - 1)]
    bounds.append(((parts - 1) * base, N))
    return bounds


def _threshold(N: int, cfg: CollectiveConfig) -> int:
    return switch_threshold(N, cfg.precision.isize, cfg.index_bytes, cfg.threshold_scale)


def _prepare(local: SparseStream, cfg: CollectiveConfig) -> SparseStream:
    if local.precision is not cfg.precision:
        raise InvalidArgumentError(f"stream precision {local.precision.value} differs from collective precision {cfg.precision.value}")
    stream = local.copy()
    if not stream.is_dense and stream.pair_count > _threshold(stream.dimension, cfg):
        stream = densify(stream, cfg.reduction)
    return stream


def _window(stream: SparseStream, lo: int, hi: int, cfg: CollectiveConfig) -> SparseStream:
    part = window(stream, lo, hi, cfg.reduction, cfg.threshold_scale)
    if not part.is_dense and part.pair_count > _threshold(hi - lo, cfg):
        part = densify(part, cfg.reduction)
    return part


def _decode(payload: bytes, dimension: int, cfg: CollectiveConfig) -> SparseStream:
    stream = deserialize(payload, cfg.precision)
    if stream.dimension != dimension:
        raise UsageError(f"received a stream of dimension {stream.dimension}, expected {dimension}; ranks disagree on the collective")
    return stream


# =====================================================================================================
# MESSAGE HELPERS
# =====================================================================================================


def _send_stream(endpoint: Endpoint, to: int, stream: Optional[SparseStream], stage: str) -> OpHandle:
    # zero-width windows travel as empty messages
    if stream is None:
        return endpoint.isend(to, b"", stage)
    return endpoint.isend(to, serialize(stream), stage, pair_count=stream.pair_count, dense_count=stream.dense_count)


def _send_pieces(endpoint: Endpoint, to: int, held: Dict[int, bytes], pids: Sequence[int], cfg: CollectiveConfig, stage: str) -> None:
    """One message carrying the encoded partitions `pids`, concatenated in partition order"""
    volumes = [payload_volume(held[pid], cfg.precision) for pid in pids]
    payload = b"".join(held[pid] for pid in pids)
    endpoint.send(to, payload, stage, pair_count=sum(v[0] for v in volumes), dense_count=sum(v[1] for v in volumes))


def _split_pieces(payload: bytes, pids: Sequence[int], widths: Sequence[int], cfg: CollectiveConfig) -> Dict[int, bytes]:
    pieces = {}
    offset = 0
    for pid in pids:
        if widths[pid] == 0:
            pieces[pid] = b""
            continue
        size = payload_length(payload, offset, cfg.precision)
        if offset + size > len(payload):
            raise DecodeError(f"partition {pid} runs past the end of the message")
        pieces[pid] = bytes(payload[offset : offset + size])
        offset += size
    if offset != len(payload):
        raise DecodeError(f"{len(payload) - offset} trailing bytes after the expected partitions")
    return pieces


def _assemble(held: Dict[int, bytes], bounds: Bounds, N: int, cfg: CollectiveConfig) -> SparseStream:
    parts, ranges = [], []
    for pid in sorted(held):
        lo, hi = bounds[pid]
        if hi == lo:
            continue
        parts.append(place(_decode(held[pid], hi - lo, cfg), lo, N, cfg.reduction))
        ranges.append((lo, hi))
    if not parts:
        return empty_stream(N, cfg.precision)
    return concat_disjoint(parts, ranges, cfg.reduction, _threshold(N, cfg))


# =====================================================================================================
# POWER-OF-TWO FOLDING
# =====================================================================================================


def fold_plan(rank: int, world_size: int) -> FoldPlan:
    if world_size < 1 or not 0 <= rank < world_size:
        raise InvalidArgumentError(f"rank {rank} outside world of size {world_size}")
    active = 1 << (world_size.bit_length() - 1)
    if rank < active:
        partner = rank + active if rank + active < world_size else None
    else:
        partner = rank - active
    return FoldPlan(
        world_size=world_size,
        active_size=active,
        rank=rank,
        is_active=rank < active,
        partner=partner,
        active_ranks=list(range(active)),
    )


def fold_to_power_of_two(endpoint: Endpoint) -> FoldPlan:
    """
    Surplus ranks r >= P' (P' the largest power of two <= P) delegate to rank r - P'.
    The active sub-world is always ranks 0..P'-1.
    """
    return fold_plan(endpoint.rank, endpoint.world_size)


def fold_in(stream: SparseStream, plan: FoldPlan, endpoint: Endpoint, cfg: CollectiveConfig) -> Optional[SparseStream]:
    """Pre-step: surplus ranks hand their stream over and get None back; partners reduce it into theirs"""
    if plan.is_noop:
        return stream
    if not plan.is_active:
        _send_stream(endpoint, plan.partner, stream, StageLabels.FOLD_PRE)
        return None
    if plan.partner is None:
        return stream
    incoming = _decode(endpoint.recv(plan.partner), stream.dimension, cfg)
    # the partner always has the lower rank, so it is the left operand
    return sum_inplace(stream, incoming, cfg.reduction, _threshold(stream.dimension, cfg))


def fold_out(result: Optional[SparseStream], plan: FoldPlan, endpoint: Endpoint, cfg: CollectiveConfig, N: int) -> SparseStream:
    """Post-step: partners forward the final result to their surplus rank"""
    if plan.is_noop:
        return result
    if plan.is_active:
        if plan.partner is not None:
            _send_stream(endpoint, plan.partner, result, StageLabels.FOLD_POST)
        return result
    return _decode(endpoint.recv(plan.partner), N, cfg)


def _stage_count(plan: FoldPlan) -> int:
    return plan.active_size.bit_length() - 1


def _block_pids(rank: int, size: int, owned: Callable[[int], List[int]]) -> List[int]:
    """Partitions held by `rank` before a recursive-doubling stage whose blocks have `size` ranks"""
    base = (rank // size) * size
    return sorted(pid for member in range(base, base + size) for pid in owned(member))


def _recursive_doubling_allgather(
    endpoint: Endpoint,
    plan: FoldPlan,
    held: Dict[int, bytes],
    widths: Sequence[int],
    cfg: CollectiveConfig,
    owned: Callable[[int], List[int]],
) -> Dict[int, bytes]:
    for stage in range(1, _stage_count(plan) + 1):
        distance = 1 << (stage - 1)
        partner = endpoint.rank ^ distance
        _send_pieces(endpoint, partner, held, sorted(held), cfg, StageLabels.allgather(stage))
        theirs = _block_pids(partner, distance, owned)
        held.update(_split_pieces(endpoint.recv(partner), theirs, widths, cfg))
    return held


# =====================================================================================================
# SPARSE ALLREDUCE
# =====================================================================================================


def allreduce_ssar_recursive_double(local: SparseStream, cfg: CollectiveConfig, endpoint: Endpoint) -> SparseStream:
    """
    log2(P') exchange stages between ranks 2^(t-1) apart. Each stage sends the whole current stream,
    so the per-rank volume lies between log2(P)·k (identical supports) and (P-1)·k (disjoint supports).
    """
    op = cfg.reduction
    stream = _prepare(local, cfg)
    N = stream.dimension
    threshold = _threshold(N, cfg)
    plan = fold_to_power_of_two(endpoint)

    stream = fold_in(stream, plan, endpoint, cfg)
    if plan.is_active:
        for stage in range(1, _stage_count(plan) + 1):
            partner = endpoint.rank ^ (1 << (stage - 1))
            _send_stream(endpoint, partner, stream, StageLabels.recursive_doubling(stage))
            incoming = _decode(endpoint.recv(partner), N, cfg)
            # lower rank's data is always the left operand so both replicas compute the same bytes
            if endpoint.rank < partner:
                stream = sum_inplace(stream, incoming, op, threshold)
            else:
                stream = sum_inplace(incoming, stream, op, threshold)

    result = fold_out(stream, plan, endpoint, cfg, N)
    logger.debug(f"rank {endpoint.rank}: recursive doubling done, {result.repr.value} result with {result.nnz} entries")
    return result


def _reduce_partitions(stream: SparseStream, cfg: CollectiveConfig, endpoint: Endpoint, plan: FoldPlan) -> Tuple[Optional[SparseStream], Bounds]:
    """
    Split phase: every active rank sends the slice of each partition to its owner (empty slices
    included) and reduces the P' slices of its own partition in rank order. Returns the reduced
    partition in local coordinates, or None for a zero-width partition.
    """
    op = cfg.reduction
    rank = endpoint.rank
    bounds = partition_bounds(stream.dimension, plan.active_size)

    receives = {peer: endpoint.irecv(peer) for peer in plan.active_ranks if peer != rank}
    sends = []
    own = None
    for peer in plan.active_ranks:
        lo, hi = bounds[peer]
        part = _window(stream, lo, hi, cfg) if hi > lo else None
        if peer == rank:
            own = part
        else:
            sends.append(_send_stream(endpoint, peer, part, StageLabels.SPLIT_SLICE))
    for handle in sends:
        handle.wait()

    lo, hi = bounds[rank]
    width = hi - lo
    payloads = {peer: handle.wait() for peer, handle in receives.items()}
    if width == 0:
        return None, bounds

    threshold = _threshold(width, cfg)
    reduced = None
    for peer in plan.active_ranks:
        part = own if peer == rank else _decode(payloads[peer], width, cfg)
        reduced = part if reduced is None else sum_inplace(reduced, part, op, threshold)
    return reduced, bounds


def allreduce_ssar_split_allgather(local: SparseStream, cfg: CollectiveConfig, endpoint: Endpoint) -> SparseStream:
    """Sparse reduce-scatter over P' partitions followed by a concatenating recursive-doubling allgather"""
    stream = _prepare(local, cfg)
    N = stream.dimension
    plan = fold_to_power_of_two(endpoint)

    stream = fold_in(stream, plan, endpoint, cfg)
    result = None
    if plan.is_active:
        reduced, bounds = _reduce_partitions(stream, cfg, endpoint, plan)
        held = {endpoint.rank: b"" if reduced is None else serialize(reduced)}
        widths = [hi - lo for lo, hi in bounds]
        held = _recursive_doubling_allgather(endpoint, plan, held, widths, cfg, lambda member: [member])
        result = _assemble(held, bounds, N, cfg)

    result = fold_out(result, plan, endpoint, cfg, N)
    logger.debug(f"rank {endpoint.rank}: split allgather done, {result.repr.value} result with {result.nnz} entries")
    return result


def allreduce_dsar_split_allgather(local: SparseStream, cfg: CollectiveConfig, endpoint: Endpoint) -> SparseStream:
    """
    Same split phase as the static variant, then each owner densifies its partition and the
    partitions are gathered as fixed-size dense blocks. With quantize_dense_phase set, the dense
    blocks are quantized by their owner and every rank (owner included) decodes the same bytes.
    """
    stream = _prepare(local, cfg)
    N = stream.dimension
    plan = fold_to_power_of_two(endpoint)
    scheme = cfg.quantize_dense_phase

    stream = fold_in(stream, plan, endpoint, cfg)
    result = None
    if plan.is_active:
        reduced, bounds = _reduce_partitions(stream, cfg, endpoint, plan)
        if reduced is None:
            piece = b""
        else:
            dense = densify(reduced, cfg.reduction)
            if scheme is None:
                piece = serialize(dense)
            else:
                rng = np.random.default_rng([scheme.seed, endpoint.rank])
                blocks = quantization_services.quantize(dense.values, scheme, rng)
                piece = quantization_services.encode_blocks(blocks, scheme, dense.dimension)

        widths = [hi - lo for lo, hi in bounds]
        held = _recursive_doubling_allgather(endpoint, plan, {endpoint.rank: piece}, widths, cfg, lambda member: [member])
        result = densify(_assemble(held, bounds, N, cfg), cfg.reduction)

    result = fold_out(result, plan, endpoint, cfg, N)
    logger.debug(f"rank {endpoint.rank}: dynamic split allgather done (quantized={scheme is not None})")
    return result


# =====================================================================================================
# DENSE BASELINE
# =====================================================================================================


def _send_chunk(endpoint: Endpoint, to: int, buffer: np.ndarray, bounds: Tuple[int, int], cfg: CollectiveConfig, stage: str) -> None:
    lo, hi = bounds
    chunk = from_dense(buffer[lo:hi], cfg.precision) if hi > lo else None
    _send_stream(endpoint, to, chunk, stage)


def _recv_chunk(endpoint: Endpoint, frm: int, bounds: Tuple[int, int], cfg: CollectiveConfig) -> Optional[np.ndarray]:
    lo, hi = bounds
    payload = endpoint.recv(frm)
    if hi == lo:
        return None
    return _decode(payload, hi - lo, cfg).values


def allreduce_dense_baseline(local: SparseStream, cfg: CollectiveConfig, endpoint: Endpoint) -> SparseStream:
    """Ring reduce-scatter plus ring allgather over the densified input: 2(P-1) messages per rank"""
    stream = _prepare(local, cfg)
    op = cfg.reduction
    rank, P = endpoint.rank, endpoint.world_size
    buffer = logical_vector(stream, op)
    if P == 1:
        return from_dense(buffer, cfg.precision)

    bounds = partition_bounds(stream.dimension, P)
    right, left = (rank + 1) % P, (rank - 1) % P

    for step in range(P - 1):
        _send_chunk(endpoint, right, buffer, bounds[(rank - step) % P], cfg, StageLabels.ring_reduce_scatter(step + 1))
        target = (rank - step - 1) % P
        incoming = _recv_chunk(endpoint, left, bounds[target], cfg)
        if incoming is not None:
            lo, hi = bounds[target]
            op.apply(buffer[lo:hi], incoming, out=buffer[lo:hi])

    # rank r now owns the complete chunk r + 1
    for step in range(P - 1):
        _send_chunk(endpoint, right, buffer, bounds[(rank + 1 - step) % P], cfg, StageLabels.ring_allgather(step + 1))
        target = (rank - step) % P
        incoming = _recv_chunk(endpoint, left, bounds[target], cfg)
        if incoming is not None:
            lo, hi = bounds[target]
            buffer[lo:hi] = incoming

    logger.debug(f"rank {endpoint.rank}: dense ring allreduce done")
    return from_dense(buffer, cfg.precision)


# =====================================================================================================
# ALLGATHER
# =====================================================================================================


def _check_ranges(ranges: Sequence[Tuple[int, int]], N: int, P: int) -> Bounds:
    if len(ranges) != P:
        raise InvalidArgumentError(f"need one declared range per rank ({P}), got {len(ranges)}")
    checked = [(int(lo), int(hi)) for lo, hi in ranges]
    previous_stop = 0
    for lo, hi in sorted(checked):
        if lo < 0 or hi > N or lo > hi:
            raise InvalidArgumentError(f"invalid range [{lo}, {hi}) for dimension {N}")
        if lo < previous_stop:
            raise InvalidArgumentError(f"range [{lo}, {hi}) overlaps another rank's range")
        previous_stop = hi
    return checked


def _allgather(local: SparseStream, cfg: CollectiveConfig, endpoint: Endpoint, ranges: Optional[Sequence[Tuple[int, int]]], dense: bool) -> SparseStream:
    stream = _prepare(local, cfg)
    N = stream.dimension
    rank, P = endpoint.rank, endpoint.world_size
    bounds = _check_ranges(ranges if ranges is not None else partition_bounds(N, P), N, P)

    lo, hi = bounds[rank]
    if not stream.is_dense and stream.pair_count:
        if int(stream.indices[0]) < lo or int(stream.indices[-1]) >= hi:
            raise InvalidArgumentError(f"rank {rank} holds entries outside its range [{lo}, {hi})")
    if hi > lo:
        part = _window(stream, lo, hi, cfg)
        held = {rank: serialize(densify(part, cfg.reduction) if dense else part)}
    else:
        held = {rank: b""}

    widths = [stop - start for start, stop in bounds]
    plan = fold_to_power_of_two(endpoint)

    def owned(member: int) -> List[int]:
        surplus = member + plan.active_size
        return [member, surplus] if surplus < P else [member]

    if not plan.is_active:
        _send_pieces(endpoint, plan.partner, held, [rank], cfg, StageLabels.FOLD_PRE)
        rest = [pid for pid in range(P) if pid != rank]
        held.update(_split_pieces(endpoint.recv(plan.partner), rest, widths, cfg))
        return _assemble(held, bounds, N, cfg)

    if plan.partner is not None:
        held.update(_split_pieces(endpoint.recv(plan.partner), [plan.partner], widths, cfg))
    held = _recursive_doubling_allgather(endpoint, plan, held, widths, cfg, owned)
    if plan.partner is not None:
        rest = [pid for pid in range(P) if pid != plan.partner]
        _send_pieces(endpoint, plan.partner, held, rest, cfg, StageLabels.FOLD_POST)
    return _assemble(held, bounds, N, cfg)


def allgather_sparse(local: SparseStream, cfg: CollectiveConfig, endpoint: Endpoint, ranges: Optional[Sequence[Tuple[int, int]]] = None) -> SparseStream:
    """
    Concatenating allgather: rank r contributes the entries of its declared range (default: the
    even partition of [0, N) over all P ranks) and every rank returns the concatenation.
    """
    result = _allgather(local, cfg, endpoint, ranges, dense=False)
    logger.debug(f"rank {endpoint.rank}: sparse allgather done, {result.nnz} entries")
    return result


def allgather_dense(local: SparseStream, cfg: CollectiveConfig, endpoint: Endpoint, ranges: Optional[Sequence[Tuple[int, int]]] = None) -> SparseStream:
    """Allgather of fixed-size dense blocks; the result is always dense"""
    result = densify(_allgather(local, cfg, endpoint, ranges, dense=True), cfg.reduction)
    logger.debug(f"rank {endpoint.rank}: dense allgather done")
    return result


# =====================================================================================================
# DISPATCH
# =====================================================================================================


def select_algorithm(cfg: CollectiveConfig, N: int, P: int) -> CollectiveAlgorithm:
    """
    Dense path once the expected reduced size reaches the switch threshold (ties go dense),
    recursive doubling while the expected result fits the small-message cutoff, split allgather otherwise.
    """
    if cfg.expected_nnz is None:
        raise InvalidArgumentError("auto selection needs expected_nnz")
    expected = expected_density_closed_form(min(cfg.expected_nnz, N), N, P)
    if expected >= _threshold(N, cfg):
        return CollectiveAlgorithm.DSAR_SPLIT_ALLGATHER
    if expected * (cfg.index_bytes + cfg.precision.isize) <= cfg.small_message_cutoff_bytes:
        return CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE
    return CollectiveAlgorithm.SSAR_SPLIT_ALLGATHER


def allreduce_auto(local: SparseStream, cfg: CollectiveConfig, endpoint: Endpoint) -> SparseStream:
    if cfg.algorithm is not CollectiveAlgorithm.AUTO:
        raise InvalidArgumentError(f"allreduce_auto called with algorithm {cfg.algorithm.value}")
    chosen = select_algorithm(cfg, local.dimension, endpoint.world_size)
    logger.debug(f"rank {endpoint.rank}: auto selected {chosen.value}")
    return _DISPATCH[chosen](local, cfg.model_copy(update={"algorithm": chosen}), endpoint)


_DISPATCH: Dict[CollectiveAlgorithm, Callable[[SparseStream, CollectiveConfig, Endpoint], SparseStream]] = {
    CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE: allreduce_ssar_recursive_double,
    CollectiveAlgorithm.SSAR_SPLIT_ALLGATHER: allreduce_ssar_split_allgather,
    CollectiveAlgorithm.DSAR_SPLIT_ALLGATHER: allreduce_dsar_split_allgather,
    CollectiveAlgorithm.DENSE_BASELINE: allreduce_dense_baseline,
    CollectiveAlgorithm.AUTO: allreduce_auto,
}


def allreduce(local: SparseStream, cfg: CollectiveConfig, endpoint: Endpoint) -> SparseStream:
    return _DISPATCH[cfg.algorithm](local, cfg, endpoint)


def iallreduce(local: SparseStream, cfg: CollectiveConfig, endpoint: Endpoint) -> OpHandle:
    """Nonblocking allreduce: runs on a background worker, the handle's wait() returns the result"""
    executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"iallreduce-{endpoint.rank}")
    future = executor.submit(allreduce, local, cfg, endpoint)
    executor.shutdown(wait=False)
    return OpHandle(endpoint.world, "collective", future=future)
