from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from fastapi.middleware.cors import CORSMiddleware
from contextlib import asynccontextmanager
import logging

from app.configs.app_settings import settings
from app.routes.harness_routes import harness_router
from fastapi.exceptions import RequestValidationError
from app.utils.logging_handlers import configure_logging

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    # before yield = code to run during startup
    configure_logging(settings.LOG_LEVEL)
    logger.info(f"✅ Harness API ready (backend={settings.TRANSPORT_BACKEND}, world size={settings.WORLD_SIZE})")

    yield
    # after yield = code to run during shutdown
    logger.info("✅ Harness API stopped")


app = FastAPI(title="Sparse Collectives API", version="1.0.0", lifespan=lifespan)


# RunSpec validation failures (bad grid, unknown algorithm, ...) come back as 400 like every InvalidArgumentError
@app.exception_handler(RequestValidationError)
async def custom_request_validation_exception_handler(request: Request, exc: RequestValidationError):
    """Handle validation errors"""
    logger.warning(f"⚠️ Rejected request to {request.url.path}: {len(exc.errors())} validation error(s)")
    return JSONResponse(status_code=400, content={"detail": "Validation error", "errors": jsonable_errors(exc)})


def jsonable_errors(exc: RequestValidationError) -> list:
    # ctx may carry the raised ValueError itself
    return [{key: value for key, value in error.items() if key != "ctx"} for error in exc.errors()]


app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],  # Adjust this in production
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


# Include routers
app.include_router(harness_router, prefix=settings.API_V1_STR)


@app.get("/")
async def root():
    return {"message": "Welcome to Sparse Collectives API"}
