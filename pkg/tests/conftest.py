from typing import Callable, List

import numpy as np
import pytest

from app.models.stream_models import SparseStream, ValuePrecision
from app.services.sparse_stream_services import from_pairs
from app.utils.world_handlers import run_ranks, world_session


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def run_world(P: int, fn: Callable, backend=None):
    """Run fn(endpoint) on P ranks of a fresh world; returns (per-rank results, trace summary)"""
    with world_session(P, backend) as world:
        results = run_ranks(world, fn)
        summary = world.trace_summary()
    return results, summary


def pairs_stream(N: int, pairs: dict, precision: ValuePrecision = ValuePrecision.F32) -> SparseStream:
    return from_pairs(N, list(pairs.keys()), list(pairs.values()), precision)


def disjoint_inputs(P: int, N: int, k: int) -> List[SparseStream]:
    """Rank r holds k ones on [r·k, (r+1)·k): no two ranks share an index"""
    return [from_pairs(N, np.arange(r * k, (r + 1) * k), np.ones(k)) for r in range(P)]


def overlapping_inputs(P: int, N: int, k: int) -> List[SparseStream]:
    """Every rank holds k ones on the same indices"""
    return [from_pairs(N, np.arange(k), np.ones(k)) for _ in range(P)]
