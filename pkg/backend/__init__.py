"""AgentFlow Program Scheduler backend."""
