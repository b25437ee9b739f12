"""Wire protocol, edge daemon and client session."""

from .client import EdgeClient, infer_offloaded, parse_endpoint
from .server import EdgeCore, EdgeServer

__all__ = ["EdgeClient", "EdgeCore", "EdgeServer", "infer_offloaded", "parse_endpoint"]
