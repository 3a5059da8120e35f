"""Tool execution routes."""

from app.api.deps import get_gateway
from app.models.api import ToolRunRequest, ToolRunResponse
from app.services.gateway import ProgramGateway
from fastapi import APIRouter, Depends

router = APIRouter(prefix="/tools", tags=["tools"])


@router.post("/run", response_model=ToolRunResponse)
async def run_tool(request: ToolRunRequest, gateway: ProgramGateway = Depends(get_gateway)):
    """Run a tool call in the program's sandbox and return its result."""
    return await gateway.handle_tool(request)
