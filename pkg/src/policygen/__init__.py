"""Conditional policy generator for dynamic constraint satisfaction on Synt-ND."""

__version__ = "0.1.0"
BUILD_ID = f"policygen-{__version__}"
