"""
AgentFlow Program Scheduler - Main Application.

A program-aware gateway in front of data-parallel inference backends.
"""

import logging
from contextlib import asynccontextmanager

from app.api.routes import chat_router, metrics_router, programs_router, tools_router
from app.core.config import EngineConfig, get_engine_config, get_settings
from app.core.errors import EngineError
from app.core.logging import configure_logging
from app.services.gateway import ProgramGateway
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

logger = logging.getLogger(__name__)

VERSION = "1.0.0"


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Application lifespan manager."""
    settings = get_settings()
    gateway: ProgramGateway = app.state.gateway
    logger.info("%s starting (%s)", settings.app_name, settings.app_env)
    await gateway.start()

    yield

    logger.info("Shutting down gateway at tick %d", gateway.now)
    await gateway.stop()


async def engine_error_handler(request: Request, exc: EngineError) -> JSONResponse:
    return JSONResponse(status_code=exc.status_code, content={"error": exc.to_dict()})


def create_app(
    engine: EngineConfig | None = None, gateway: ProgramGateway | None = None
) -> FastAPI:
    """Create and configure the FastAPI application."""
    settings = get_settings()
    configure_logging(settings.log_level)
    engine = engine or get_engine_config()

    app = FastAPI(
        title=settings.app_name,
        description="""
        Program-aware scheduling gateway for agentic LLM workloads.

        ## Features

        - **Program tagging**: completion requests carry `extra.program_id`
        - **Pause/restore scheduling**: whole programs move between backends
          through a global waiting queue instead of thrashing KV caches
        - **Tool environments**: sandboxes are prepared ahead of time and
          reclaimed as soon as a program is released

        ## How to Use

        1. Send completion requests with `extra.program_id` set
        2. Run tool calls through `POST /tools/run` with the same id
        3. Call `POST /programs/release` when the program is done
        """,
        version=VERSION,
        lifespan=lifespan,
    )
    app.state.gateway = gateway or ProgramGateway(engine)

    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.add_exception_handler(EngineError, engine_error_handler)

    app.include_router(chat_router)
    app.include_router(tools_router)
    app.include_router(programs_router)
    app.include_router(metrics_router)

    @app.get("/api/health")
    async def health_check():
        """Health check endpoint."""
        current: ProgramGateway = app.state.gateway
        return {
            "status": "healthy",
            "app": settings.app_name,
            "version": VERSION,
            "tick": current.now,
            "backends": {
                r.backend_id: r.mirror.healthy for r in current.replicas.values()
            },
        }

    @app.get("/api/info")
    async def get_info():
        """Get application information."""
        current: ProgramGateway = app.state.gateway
        return {
            "name": settings.app_name,
            "version": VERSION,
            "description": "Program-aware agentic inference gateway",
            "policy": current.policy.name,
            "backends": [r.adapter.url for r in current.replicas.values()],
            "scheduler": current.engine.scheduler.model_dump(mode="json"),
        }

    return app


app = create_app()


if __name__ == "__main__":
    import uvicorn

    settings = get_settings()
    uvicorn.run(
        "app.main:app",
        host=settings.host,
        port=settings.port,
        reload=settings.app_debug,
    )
