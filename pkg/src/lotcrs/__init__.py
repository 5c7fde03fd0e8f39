"""Long-tail conversational recommendation at desk scale."""
__version__ = "0.1.0"
