"""API routes module."""

from app.api.routes.chat import router as chat_router
from app.api.routes.metrics import router as metrics_router
from app.api.routes.programs import router as programs_router
from app.api.routes.tools import router as tools_router

__all__ = ["chat_router", "metrics_router", "programs_router", "tools_router"]
