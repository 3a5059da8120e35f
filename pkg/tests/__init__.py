"""Test suite for the AgentFlow program scheduler."""
