"""API module for FastAPI routes."""
