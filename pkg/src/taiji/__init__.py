"""Multi-modal analytical query engine over a local data lake."""

__version__ = "0.1.0"
