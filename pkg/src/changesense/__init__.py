"""Multi-temporal change perception toolkit."""

__version__ = "0.1.0"
