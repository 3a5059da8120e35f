"""
AgentFlow Program Scheduler
Program-aware scheduling of agentic LLM workflows.
"""

__version__ = "1.0.0"
