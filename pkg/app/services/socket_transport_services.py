from typing import Dict, List, Optional, Tuple
import logging
import socket
import struct
import threading

from app.configs.app_settings import settings
from app.custom_error import TransportError
from app.models.transport_models import BackendKind
from app.services.transport_services import World

logger = logging.getLogger(__name__)

_FRAME = struct.Struct("<I")


def _read_exact(conn: socket.socket, size: int) -> Optional[bytes]:
    chunks = []
    remaining = size
    while remaining:
        chunk = conn.recv(remaining)
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


class SocketWorld(World):
    """
    Every rank listens on its own loopback port; each ordered (src, dst) pair uses one TCP connection,
    so per-pair FIFO comes from the stream itself. Frames are a u32 length prefix plus payload; the
    first frame of a connection carries the sender's rank.
    """

    backend = BackendKind.SOCKET

    def __init__(self, world_size: int, watchdog_timeout: Optional[float] = None, host: Optional[str] = None):
        super().__init__(world_size, watchdog_timeout)
        self.host = host or settings.SOCKET_HOST
        self._listeners: List[socket.socket] = []
        self._connections: Dict[Tuple[int, int], socket.socket] = {}
        self._pair_locks: Dict[Tuple[int, int], threading.Lock] = {}
        self._arrivals: Dict[Tuple[int, int], int] = {}
        self._threads: List[threading.Thread] = []
        self._sockets: List[socket.socket] = []

        try:
            for rank in range(world_size):
                listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                listener.bind((self.host, 0))
                listener.listen(world_size)
                self._listeners.append(listener)
                thread = threading.Thread(target=self._accept_loop, args=(rank, listener), daemon=True)
                thread.start()
                self._threads.append(thread)
        except OSError as e:
            logger.error(f"❌ Failed to bind loopback listeners - {str(e)}")
            self.shutdown()
            raise TransportError(f"cannot open loopback listeners: {str(e)}")

        logger.info(f"✅ Socket world up: {world_size} ranks on {self.host} ports {self.ports}")

    @property
    def ports(self) -> List[int]:
        return [listener.getsockname()[1] for listener in self._listeners]

    # ---------------------------------------------------------------------------------------------

    def _accept_loop(self, rank: int, listener: socket.socket) -> None:
        while not self.closed:
            try:
                conn, _ = listener.accept()
            except OSError:
                return
            self._sockets.append(conn)
            thread = threading.Thread(target=self._read_loop, args=(rank, conn), daemon=True)
            thread.start()
            self._threads.append(thread)

    def _read_loop(self, dst: int, conn: socket.socket) -> None:
        hello = _read_exact(conn, _FRAME.size)
        if hello is None:
            return
        (src,) = _FRAME.unpack(hello)
        while True:
            try:
                prefix = _read_exact(conn, _FRAME.size)
                if prefix is None:
                    return
                (length,) = _FRAME.unpack(prefix)
                payload = _read_exact(conn, length) if length else b""
                if payload is None:
                    return
            except OSError:
                return
            with self._condition:
                seq = self._arrivals.get((src, dst), 0)
                self._arrivals[(src, dst)] = seq + 1
                self._deliver(src, dst, seq, payload)

    def _connection(self, src: int, dst: int) -> socket.socket:
        pair = (src, dst)
        conn = self._connections.get(pair)
        if conn is None:
            conn = socket.create_connection((self.host, self.ports[dst]))
            conn.sendall(_FRAME.pack(src))
            self._connections[pair] = conn
            self._sockets.append(conn)
        return conn

    def _post(self, src: int, dst: int, payload: bytes, stage: str, pair_count: int, dense_count: int) -> None:
        pair = (src, dst)
        with self._condition:
            if self._closed:
                raise TransportError("world has been shut down")
            lock = self._pair_locks.setdefault(pair, threading.Lock())
        with lock:
            try:
                self._connection(src, dst).sendall(_FRAME.pack(len(payload)) + payload)
            except OSError as e:
                logger.error(f"❌ Socket send {src}->{dst} failed - {str(e)}")
                raise TransportError(f"socket send {src}->{dst} failed: {str(e)}")
            with self._condition:
                self._record(src, dst, payload, stage, pair_count, dense_count)

    def shutdown(self) -> None:
        super().shutdown()
        for sock in self._listeners + self._sockets:
            try:
                # shutdown() wakes a thread blocked in accept() or recv(); close() alone does not on Linux
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass
