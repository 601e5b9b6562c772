"""Perception sidecar: segmentation and embedding services behind a
newline-delimited JSON protocol, with a model-free fake mode for CI."""

__version__ = "0.1.0"

from .backend import BackendError, FakeBackend, connected_components
from .server import PROTOCOL_VERSION, RequestHandler, serve_stdio, serve_tcp
