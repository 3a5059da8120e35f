"""Metrics route."""

from app.api.deps import get_gateway
from app.models.cost import MetricsReport
from app.services.gateway import ProgramGateway
from fastapi import APIRouter, Depends

router = APIRouter(tags=["metrics"])


@router.get("/metrics", response_model=MetricsReport)
async def get_metrics(gateway: ProgramGateway = Depends(get_gateway)):
    """Headline metrics since the gateway started."""
    return gateway.metrics()
