from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, TypeVar
import logging

from app.configs.app_settings import settings
from app.custom_error import TransportError
from app.models.transport_models import BackendKind
from app.services.socket_transport_services import SocketWorld
from app.services.transport_services import Endpoint, SimulatedWorld, World

logger = logging.getLogger(__name__)

T = TypeVar("T")

# lifecycle:
# 1. create_world() builds the shared message store for P ranks (backend from settings unless given)
# 2. run_ranks() executes one callable per rank, each on its own worker thread, and returns results in rank order
# 3. close_world() shuts the world down; blocked receivers wake up with TransportError


def create_world(world_size: int, backend: Optional[BackendKind] = None, watchdog_timeout: Optional[float] = None) -> World:
    kind = BackendKind(backend or settings.TRANSPORT_BACKEND)
    if kind is BackendKind.SOCKET:
        return SocketWorld(world_size, watchdog_timeout)
    return SimulatedWorld(world_size, watchdog_timeout)


def close_world(world: World) -> None:
    world.shutdown()


def run_ranks(world: World, fn: Callable[[Endpoint], T]) -> List[T]:
    """Run fn on every rank concurrently; the world is shut down on the first failure and the first real failure (by rank) is re-raised"""
    endpoints = [world.endpoint(rank) for rank in range(world.world_size)]
    if world.world_size == 1:
        return [fn(endpoints[0])]

    with ThreadPoolExecutor(max_workers=world.world_size, thread_name_prefix="rank") as pool:
        futures = [pool.submit(fn, endpoint) for endpoint in endpoints]
        done, _ = wait(futures, return_when=FIRST_EXCEPTION)
        if any(future.exception() is not None for future in done):
            # unblock peers still waiting on the failed rank
            world.shutdown()

    errors = [(rank, future.exception()) for rank, future in enumerate(futures) if future.exception() is not None]
    if errors:
        primary = next((e for e in errors if not isinstance(e[1], TransportError)), errors[0])
        logger.error(f"❌ Rank {primary[0]} failed - {str(primary[1])}")
        raise primary[1]
    return [future.result() for future in futures]


@contextmanager
def world_session(world_size: int, backend: Optional[BackendKind] = None, watchdog_timeout: Optional[float] = None) -> Iterator[World]:
    world = create_world(world_size, backend, watchdog_timeout)
    try:
        yield world
    finally:
        close_world(world)
