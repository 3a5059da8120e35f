"""
Chat API Routes.

Completion-style endpoint. Requests carry their program id in
``extra.program_id``; the body is forwarded with the id stripped and the
backend's response is returned byte for byte.
"""

from app.api.deps import get_gateway
from app.models.api import ChatRequest
from app.services.gateway import ProgramGateway
from fastapi import APIRouter, Depends, Response

router = APIRouter(prefix="/v1/chat", tags=["chat"])


@router.post("/completions")
async def chat_completions(
    request: ChatRequest, gateway: ProgramGateway = Depends(get_gateway)
) -> Response:
    """
    Forward one completion request of an agent program.

    A program seen for the first time is registered and queued; the request
    waits until the scheduler gives the program a backend.
    """
    raw = await gateway.handle_chat(request)
    return Response(content=raw, media_type="application/json")
