"""Shared route dependencies."""

from app.services.gateway import ProgramGateway
from fastapi import Request


def get_gateway(request: Request) -> ProgramGateway:
    """The gateway owned by the running application."""
    return request.app.state.gateway
