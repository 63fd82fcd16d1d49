from concurrent.futures import Future
from typing import Dict, List, Optional, Tuple
import logging
import threading
import time

from app.configs.app_settings import settings
from app.configs.wire_constants import StageLabels
from app.custom_error import TransportError, UsageError
from app.models.transport_models import BackendKind, RankTraffic, StageTraffic, TraceRecord, TraceSummary

logger = logging.getLogger(__name__)


class OpHandle:
    """
    In-flight send, receive or collective. wait() may be called once; test() polls without blocking
    and keeps returning True once the operation has completed.
    """

    def __init__(self, world: "World", kind: str, src: int = -1, dst: int = -1, ticket: int = -1, future: Optional[Future] = None):
        self._world = world
        self.kind = kind
        self._src = src
        self._dst = dst
        self._ticket = ticket
        self._future = future
        self._done = kind == "send"
        self._waited = False
        self._result = None
        world._register_handle()
        if self._done:
            world._complete_handle()

    def test(self) -> bool:
        if self._done:
            return True
        if self._future is not None:
            if not self._future.done():
                return False
            self._result = self._future.result()
        else:
            payload = self._world._poll(self._src, self._dst, self._ticket)
            if payload is None:
                return False
            self._result = payload
        self._done = True
        self._world._complete_handle()
        return True

    def wait(self):
        if self._waited:
            raise UsageError(f"{self.kind} handle waited twice")
        self._waited = True
        if not self._done:
            if self._future is not None:
                self._result = self._future.result()
            else:
                self._result = self._world._take(self._src, self._dst, self._ticket)
            self._done = True
            self._world._complete_handle()
        return self._result


class Endpoint:
    """Rank-local view of a world; confined to the worker that runs that rank"""

    def __init__(self, world: "World", rank: int):
        self.world = world
        self.rank = rank
        self.world_size = world.world_size

    def _check_peer(self, peer: int) -> None:
        if not 0 <= peer < self.world_size:
            raise TransportError(f"rank {peer} outside world of size {self.world_size}")
        if peer == self.rank:
            raise TransportError(f"rank {self.rank} cannot message itself")

    def isend(self, to: int, payload: bytes, stage: str = StageLabels.P2P, pair_count: int = 0, dense_count: int = 0) -> OpHandle:
        self._check_peer(to)
        self.world._post(self.rank, to, bytes(payload), stage, pair_count, dense_count)
        return OpHandle(self.world, "send", src=self.rank, dst=to)

    def irecv(self, frm: int) -> OpHandle:
        self._check_peer(frm)
        ticket = self.world._issue_ticket(frm, self.rank)
        return OpHandle(self.world, "recv", src=frm, dst=self.rank, ticket=ticket)

    def send(self, to: int, payload: bytes, stage: str = StageLabels.P2P, pair_count: int = 0, dense_count: int = 0) -> None:
        self.isend(to, payload, stage, pair_count, dense_count).wait()

    def recv(self, frm: int) -> bytes:
        return self.irecv(frm).wait()

    def wait(self, handle: OpHandle):
        return handle.wait()

    def test(self, handle: OpHandle) -> bool:
        return handle.test()


# =====================================================================================================
# WORLDS
# =====================================================================================================


class World:
    """
    Shared message store and trace sink for P rank workers. Messages of an ordered (src, dst) pair are
    numbered on send and matched to receive tickets in issue order, which gives per-pair FIFO delivery
    without any rendezvous.
    """

    backend = BackendKind.SIMULATED

    def __init__(self, world_size: int, watchdog_timeout: Optional[float] = None):
        if world_size < 1:
            raise UsageError(f"world size must be at least 1, got {world_size}")
        self.world_size = world_size
        self.watchdog_timeout = settings.WATCHDOG_TIMEOUT_SECONDS if watchdog_timeout is None else watchdog_timeout
        self._condition = threading.Condition()
        self._messages: Dict[Tuple[int, int], Dict[int, bytes]] = {}
        self._next_seq: Dict[Tuple[int, int], int] = {}
        self._next_ticket: Dict[Tuple[int, int], int] = {}
        self._records: List[TraceRecord] = []
        self._open_handles = 0
        self._closed = False

    def endpoint(self, rank: int) -> Endpoint:
        if not 0 <= rank < self.world_size:
            raise UsageError(f"rank {rank} outside world of size {self.world_size}")
        return Endpoint(self, rank)

    # ---------------------------------------------------------------------------------------------
    # message plumbing

    def _record(self, src: int, dst: int, payload: bytes, stage: str, pair_count: int, dense_count: int) -> int:
        pair = (src, dst)
        seq = self._next_seq.get(pair, 0)
        self._next_seq[pair] = seq + 1
        self._records.append(
            TraceRecord(src=src, dst=dst, seq=seq, stage=stage, payload_bytes=len(payload), pair_count=pair_count, dense_count=dense_count)
        )
        return seq

    def _deliver(self, src: int, dst: int, seq: int, payload: bytes) -> None:
        # caller holds the condition
        self._messages.setdefault((src, dst), {})[seq] = payload
        self._condition.notify_all()

    def _post(self, src: int, dst: int, payload: bytes, stage: str, pair_count: int, dense_count: int) -> None:
        with self._condition:
            if self._closed:
                raise TransportError("world has been shut down")
            seq = self._record(src, dst, payload, stage, pair_count, dense_count)
            self._deliver(src, dst, seq, payload)

    def _issue_ticket(self, src: int, dst: int) -> int:
        with self._condition:
            if self._closed:
                raise TransportError("world has been shut down")
            pair = (src, dst)
            ticket = self._next_ticket.get(pair, 0)
            self._next_ticket[pair] = ticket + 1
            return ticket

    def _poll(self, src: int, dst: int, ticket: int) -> Optional[bytes]:
        with self._condition:
            return self._messages.get((src, dst), {}).pop(ticket, None)

    def _take(self, src: int, dst: int, ticket: int) -> bytes:
        deadline = time.monotonic() + self.watchdog_timeout
        with self._condition:
            box = self._messages.setdefault((src, dst), {})
            while ticket not in box:
                if self._closed:
                    raise TransportError("world shut down while waiting for a message")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise UsageError(
                        f"watchdog: rank {dst} waited {self.watchdog_timeout}s for message {ticket} from rank {src}; "
                        "ranks probably called different collectives"
                    )
                self._condition.wait(remaining)
            return box.pop(ticket)

    def _register_handle(self) -> None:
        with self._condition:
            self._open_handles += 1

    def _complete_handle(self) -> None:
        with self._condition:
            self._open_handles -= 1

    # ---------------------------------------------------------------------------------------------
    # lifecycle and accounting

    def shutdown(self) -> None:
        with self._condition:
            self._closed = True
            self._condition.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed

    def bytes_sent(self, rank: int) -> int:
        with self._condition:
            return sum(r.payload_bytes for r in self._records if r.src == rank)

    def trace_records(self) -> List[TraceRecord]:
        """Records sorted by (src, dst, seq): independent of thread interleaving"""
        with self._condition:
            return sorted(self._records, key=lambda r: (r.src, r.dst, r.seq))

    def trace_summary(self) -> TraceSummary:
        with self._condition:
            if self._open_handles:
                raise UsageError(f"{self._open_handles} handle(s) still outstanding")
            undelivered = sum(len(box) for box in self._messages.values())
            if undelivered:
                raise UsageError(f"{undelivered} message(s) sent but never received")
            records = list(self._records)

        ranks = [RankTraffic(rank=r) for r in range(self.world_size)]
        stages: Dict[Tuple[int, str], StageTraffic] = {}
        for record in records:
            sender, receiver = ranks[record.src], ranks[record.dst]
            sender.messages_sent += record.message_count
            sender.bytes_sent += record.payload_bytes
            sender.pairs_sent += record.pair_count
            sender.dense_sent += record.dense_count
            receiver.messages_received += record.message_count
            receiver.bytes_received += record.payload_bytes

            row = stages.setdefault((record.src, record.stage), StageTraffic(rank=record.src, stage=record.stage))
            row.messages += record.message_count
            row.payload_bytes += record.payload_bytes
            row.pairs += record.pair_count
            row.dense_words += record.dense_count

        ordered = [stages[key] for key in sorted(stages)]
        return TraceSummary(world_size=self.world_size, ranks=ranks, stages=ordered)


class SimulatedWorld(World):
    """In-process deterministic network: no transmission delay, full accounting"""

    backend = BackendKind.SIMULATED


def trace_summary(world: World) -> TraceSummary:
    return world.trace_summary()


def trace_rows(world: World) -> List[dict]:
    """Flat trace export, one dict per message, suitable for CSV"""
    return [record.model_dump() for record in world.trace_records()]
