"""Detector adapter serving a YOLO model (or stub) over newline-delimited
JSON on stdin/stdout."""

from .adapter import AdapterConfig, serve

__version__ = "0.1.0"

__all__ = ["AdapterConfig", "serve"]
