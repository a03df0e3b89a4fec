"""Graph parsing network for tool-tissue interaction scene graphs."""

__version__ = "0.1.0"
