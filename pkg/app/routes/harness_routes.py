from typing import Callable

from fastapi import APIRouter, Depends
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import PlainTextResponse

from app.custom_error import InvalidArgumentError
from app.models.run_models import HarnessResult, RunSpec
from app.services.harness_services import HarnessService

harness_router = APIRouter(prefix="/harness", tags=["Harness"])


def get_harness_service(spec: RunSpec) -> HarnessService:
    """Dependency to get HarnessService instance"""
    # results come back in the response body; the server never writes files for a client
    if spec.output is not None:
        raise InvalidArgumentError("output is only accepted on the command line")
    return HarnessService(spec)


async def _csv_response(run: Callable[[], HarnessResult]) -> PlainTextResponse:
    # every run owns a world of rank threads; keep it off the event loop
    result = await run_in_threadpool(run)
    return PlainTextResponse(result.csv, media_type="text/csv", headers={"X-Harness-Passed": str(result.passed).lower()})


########################################################################################################################


@harness_router.post("/bench", response_class=PlainTextResponse)
async def bench(harness_service: HarnessService = Depends(get_harness_service)):
    """Micro-benchmark sweep; CSV body"""
    return await _csv_response(harness_service.bench)


# ------------------------------------------------------------------------------------------------------------------------


@harness_router.post("/density", response_class=PlainTextResponse)
async def density(harness_service: HarnessService = Depends(get_harness_service)):
    """Expected reduced size: closed form, Monte Carlo and measured; CSV body"""
    return await _csv_response(harness_service.density)


# ------------------------------------------------------------------------------------------------------------------------


@harness_router.post("/train", response_class=PlainTextResponse)
async def train(harness_service: HarnessService = Depends(get_harness_service)):
    """TopK SGD training run; per-epoch metrics CSV"""
    return await _csv_response(harness_service.train)
