"""Minimal Model Context Protocol runtime (JSON-RPC 2.0)."""

from .client import CallTimeout, MCPClient, RpcCallError
from .protocol import Notification, ProtocolError, Request, Response, RpcError, decode, encode
from .server import MCPServer, Session, Subscription, ToolContext, ToolDescriptor, ToolError
from .transport import HttpTransport, StreamTransport, inprocess_pipe, serve_http_background, subprocess_pipe

__all__ = [
    "CallTimeout", "HttpTransport", "MCPClient", "MCPServer", "Notification", "ProtocolError",
    "Request", "Response", "RpcCallError", "RpcError", "Session", "StreamTransport", "Subscription",
    "ToolContext", "ToolDescriptor", "ToolError", "decode", "encode", "inprocess_pipe",
    "serve_http_background", "subprocess_pipe",
]
