"""HTTP service exposing the experiment registry and config runs."""

from .app import create_app

__all__ = ["create_app"]
