"""A session-typed TCP echo server with a deterministic network simulator."""

__version__ = "0.1.0"
