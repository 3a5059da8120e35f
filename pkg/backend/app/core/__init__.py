"""Core module containing configuration, logging and the error hierarchy."""
