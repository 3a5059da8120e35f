"""
Entry point for running the AgentFlow gateway.
"""

import logging
import os
import sys

import uvicorn
from app.core.config import get_settings
from app.core.logging import configure_logging

logger = logging.getLogger("app.run")


def main(port: int | None = None, host: str | None = None):
    """Run the gateway."""
    settings = get_settings()
    configure_logging(settings.log_level)

    # Use UTF-8 encoding for Windows console
    if sys.platform == "win32":
        sys.stdout.reconfigure(encoding="utf-8", errors="replace")

    # Railway provides PORT environment variable
    port = port or int(os.getenv("PORT", settings.port))
    host = host or settings.host

    logger.info("Gateway: http://%s:%d", host, port)
    logger.info("API Docs: http://%s:%d/docs", host, port)

    uvicorn.run(
        "app.main:app",
        host=host,
        port=port,
        reload=settings.app_debug,
    )


if __name__ == "__main__":
    main()
