"""
Program API Routes.

Release and inspection of agent programs.
"""

from app.api.deps import get_gateway
from app.models.api import ProgramState, ReleaseRequest, ReleaseResponse
from app.services.gateway import ProgramGateway
from fastapi import APIRouter, Depends

router = APIRouter(prefix="/programs", tags=["programs"])


@router.post("/release", response_model=ReleaseResponse)
async def release_program(
    request: ReleaseRequest, gateway: ProgramGateway = Depends(get_gateway)
):
    """
    Mark a program finished.

    Its KV cache is dropped, its tool environments are reclaimed and any
    tool call still running is cancelled. Releasing twice is a no-op.
    """
    return gateway.handle_release(request)


@router.get("/{program_id}", response_model=ProgramState)
async def get_program(program_id: str, gateway: ProgramGateway = Depends(get_gateway)):
    """Current state of one program."""
    return gateway.get_program(program_id)
