"""MCP client: request/response multiplexing over any transport."""

from __future__ import annotations

import itertools
import logging
import threading
from concurrent.futures import Future, TimeoutError as FutureTimeout
from typing import Any, Callable, Optional

from . import protocol as P

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0


class RpcCallError(RuntimeError):
    def __init__(self, code: int, message: str, data: Any = None, method: str = ""):
        super().__init__(f"{method}: [{code}] {message}" if method else f"[{code}] {message}")
        self.code = code
        self.message = message
        self.data = data


class CallTimeout(RpcCallError):
    def __init__(self, method: str, timeout: float):
        super().__init__(P.TIMEOUT, f"no response within {timeout:g}s", method=method)


class MCPClient:
    """Sends requests, matches responses by id, dispatches notifications.

    ``handlers`` answer server-initiated requests (e.g. ``host/clarify``);
    they run on their own thread so the transport reader never blocks.
    ``wire_log`` records every decoded message in order, tagged with its
    direction, for replay and equivalence checks.
    """

    def __init__(self, transport, timeout: float = DEFAULT_TIMEOUT,
                 handlers: Optional[dict[str, Callable[[Any], Any]]] = None, name: str = ""):
        self.transport = transport
        self.timeout = timeout
        self.name = name
        self.handlers = dict(handlers or {})
        self._ids = itertools.count(1)
        self._id_lock = threading.Lock()
        self._pending: dict[P.Id, tuple[str, Future]] = {}
        self._listeners: dict[str, list[Callable[[Any], None]]] = {}
        self._sub_callbacks: dict[str, list[Callable[[dict], None]]] = {}
        self.wire_log: list[tuple[str, P.Message]] = []
        self._log_lock = threading.Lock()
        transport.start(self._on_message)

    # -- plumbing
    def _record(self, direction: str, msg: P.Message) -> None:
        with self._log_lock:
            self.wire_log.append((direction, msg))

    def _on_message(self, raw: bytes) -> None:
        try:
            msg = P.decode(raw)
        except P.ProtocolError as exc:
            log.warning("%s: undecodable message: %s", self.name, exc)
            return
        self._record("in", msg)
        if isinstance(msg, P.Response):
            entry = self._pending.pop(msg.id, None)
            if entry is None:
                log.warning("%s: orphan response id=%r", self.name, msg.id)
                return
            entry[1].set_result(msg)
        elif isinstance(msg, P.Notification):
            if msg.method == "resources/updated":
                uri = (msg.params or {}).get("uri")
                for cb in list(self._sub_callbacks.get(uri, ())):
                    cb(msg.params)
            for cb in list(self._listeners.get(msg.method, ())):
                cb(msg.params)
        else:
            threading.Thread(target=self._answer, args=(msg,), daemon=True).start()

    def _answer(self, req: P.Request) -> None:
        handler = self.handlers.get(req.method)
        if handler is None:
            resp = P.Response(req.id, error=P.RpcError(P.METHOD_NOT_FOUND, f"method not found: {req.method}"))
        else:
            try:
                resp = P.Response(req.id, result=handler(req.params))
            except Exception as exc:
                resp = P.Response(req.id, error=P.RpcError(P.TOOL_ERROR, str(exc)))
        self._send(resp)

    def _send(self, msg: P.Message) -> None:
        self._record("out", msg)
        self.transport.send(P.encode(msg))

    def _next_id(self) -> int:
        with self._id_lock:
            return next(self._ids)

    # -- public API
    def request(self, method: str, params: Any = None, timeout: Optional[float] = None) -> Any:
        timeout = self.timeout if timeout is None else timeout
        req = P.Request(self._next_id(), method, params if params is not None else {})
        fut: Future = Future()
        self._pending[req.id] = (method, fut)
        try:
            self._send(req)
        except Exception:
            self._pending.pop(req.id, None)
            raise
        try:
            resp: P.Response = fut.result(timeout=timeout)
        except FutureTimeout:
            self._pending.pop(req.id, None)
            raise CallTimeout(method, timeout) from None
        if resp.error is not None:
            raise RpcCallError(resp.error.code, resp.error.message, resp.error.data, method)
        return resp.result

    def notify(self, method: str, params: Any = None) -> None:
        self._send(P.Notification(method, params if params is not None else {}))

    def initialize(self) -> dict:
        return self.request("initialize", {"clientInfo": {"name": self.name or "taiji-host"}})

    def list_tools(self) -> list[dict]:
        return self.request("tools/list")["tools"]

    def call_tool(self, name: str, arguments: Optional[dict] = None, timeout: Optional[float] = None) -> Any:
        return self.request("tools/call", {"name": name, "arguments": arguments or {}}, timeout)

    def list_resources(self) -> list[dict]:
        return self.request("resources/list")["resources"]

    def subscribe(self, uri: str, callback: Optional[Callable[[dict], None]] = None) -> dict:
        sub = self.request("resources/subscribe", {"uri": uri})
        if callback is not None:
            self._sub_callbacks.setdefault(uri, []).append(callback)
        return sub

    def unsubscribe(self, uri: str) -> bool:
        self._sub_callbacks.pop(uri, None)
        return self.request("resources/unsubscribe", {"uri": uri})["removed"]

    def on_notification(self, method: str, callback: Callable[[Any], None]) -> None:
        self._listeners.setdefault(method, []).append(callback)

    def close(self) -> None:
        self.transport.close()
        for _, fut in list(self._pending.values()):
            if not fut.done():
                fut.set_result(P.Response(None, error=P.RpcError(P.TRANSPORT_ERROR, "connection closed")))
        self._pending.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
