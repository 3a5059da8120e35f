"""Tests for the HTTP surface of the gateway."""

import pytest
from app.main import create_app
from fastapi.testclient import TestClient

from tests.conftest import gateway_config


def chat_body(pid: str | None = "p1") -> dict:
    body = {"model": "agent", "messages": [{"role": "user", "content": "hello"}]}
    if pid is not None:
        body["extra"] = {"program_id": pid}
    return body


@pytest.fixture
def client():
    with TestClient(create_app(engine=gateway_config())) as test_client:
        yield test_client


def test_health(client):
    response = client.get("/api/health")

    assert response.status_code == 200
    data = response.json()
    assert data["status"] == "healthy"
    assert data["backends"] == {"backend-0": True, "backend-1": True}


def test_info(client):
    data = client.get("/api/info").json()
    assert data["policy"] == "program-aware"
    assert data["backends"] == ["sim://backend-0", "sim://backend-1"]


def test_chat_without_program_id(client):
    response = client.post("/v1/chat/completions", json=chat_body(None))

    assert response.status_code == 400
    assert response.json()["error"]["code"] == "MissingProgramId"


def test_unknown_program(client):
    response = client.get("/programs/ghost")

    assert response.status_code == 404
    assert response.json()["error"]["code"] == "UnknownProgram"


def test_invalid_tool_body(client):
    assert client.post("/tools/run", json={"program_id": "p1"}).status_code == 422


def test_program_lifecycle(client):
    response = client.post("/v1/chat/completions", json=chat_body())
    assert response.status_code == 200
    assert response.json()["usage"]["completion_tokens"] == 32

    state = client.get("/programs/p1").json()
    assert state["status"] == "reasoning"
    assert state["placement"] in ("backend-0", "backend-1")

    tool = client.post("/tools/run", json={"command": "ls", "program_id": "p1"}).json()
    assert tool["status"] == "ok"
    assert tool["latency_ticks"] >= 8

    released = client.post("/programs/release", json={"program_id": "p1"}).json()
    assert released["status"] == "released"
    assert released["reclaimed"]["disk_units"] == 2
    again = client.post("/programs/release", json={"program_id": "p1"}).json()
    assert again["status"] == "already_released"

    refused = client.post("/v1/chat/completions", json=chat_body())
    assert refused.status_code == 410
    assert refused.json()["error"]["code"] == "ProgramStopped"

    metrics = client.get("/metrics").json()
    assert metrics["completed_programs"] == 1
    assert metrics["completed_steps"] == 1
