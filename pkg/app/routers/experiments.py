import asyncio

from fastapi import APIRouter, HTTPException

from app.core.errors import TreeFedError
from app.schemas.schemas import (
    ExperimentConfig,
    LooRequest,
    LooResponse,
    RunRequest,
    RunResponse,
    fedavg_baseline,
)
from app.services import simulation
from app.services.synthetic import generate_all

router = APIRouter(prefix="/v1/experiments", tags=["Experiments"])


@router.get("/defaults")
async def get_defaults():
    return ExperimentConfig().model_dump(mode="json")


@router.post("/run", response_model=RunResponse)
async def run_experiment(payload: RunRequest):
    """Train one federation (optionally without `holdout`) and return its round logs and final tree."""
    config = payload.config
    data = await asyncio.to_thread(generate_all, config.data.domains)
    if payload.holdout is not None:
        if payload.holdout not in data:
            raise HTTPException(status_code=404, detail=f"Domain '{payload.holdout}' not found")
        data = {d: s for d, s in data.items() if d != payload.holdout}
    try:
        state = await simulation.run_federation(config, data)
    except TreeFedError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return RunResponse(rounds=list(state.logs), tree=state.tree.to_dump())


@router.post("/loo", response_model=LooResponse)
async def run_leave_one_out(payload: LooRequest):
    """
    Leave-one-domain-out report for the posted config.
    With `baseline`, the FedAvg baseline runs on the same data and seed.
    """
    configs = [payload.config] + ([fedavg_baseline(payload.config)] if payload.baseline else [])
    data = await asyncio.to_thread(generate_all, payload.config.data.domains)
    try:
        reports = [await simulation.leave_one_out(config, data) for config in configs]
    except TreeFedError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return LooResponse(reports=reports)
