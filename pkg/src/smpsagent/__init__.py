"""LLM-agent harness for adapting switched-mode power-supply SPICE netlists."""
__version__ = "0.1.0"
