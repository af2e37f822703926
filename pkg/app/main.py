import logging
import time
from contextlib import asynccontextmanager

from fastapi import FastAPI

from app.core.config import configure_logging, get_settings
from app.core.monitoring import init_monitoring
from app.routers import experiments

configure_logging()
init_monitoring(get_settings())
logger = logging.getLogger(__name__)

SLOW_REQUEST_MS = 500


@asynccontextmanager
async def lifespan(app: FastAPI):
    settings = get_settings()
    logger.info(f"Starting up, output dir {settings.output_dir}")
    yield
    logger.info("Shutting down...")


app = FastAPI(
    title="TreeFed Simulator API",
    description="Tree-structured federated domain generalization on synthetic segmentation domains.",
    version="1.0.0",
    lifespan=lifespan,
)


# ─── Latency tracking middleware ──────────────────────────────────────────────
@app.middleware("http")
async def add_latency_header(request, call_next):
    start = time.perf_counter()
    response = await call_next(request)
    latency_ms = (time.perf_counter() - start) * 1000
    response.headers["X-Response-Time-Ms"] = f"{latency_ms:.2f}"
    if latency_ms > SLOW_REQUEST_MS:
        logger.warning(f"SLOW REQUEST: {request.method} {request.url.path} {latency_ms:.0f}ms")
    return response


# ─── Routers ──────────────────────────────────────────────────────────────────
app.include_router(experiments.router)


@app.get("/health")
async def health():
    return {"status": "ok", "service": "TreeFed Simulator"}
