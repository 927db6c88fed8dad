"""Communication benchmark harness for federated learning over five transports."""

__version__ = "0.1.0"
