"""Transport-independent MCP server core.

Implements the subset ``initialize``, ``tools/list``, ``tools/call``,
``resources/list``, ``resources/subscribe``, ``resources/unsubscribe`` and
the server-to-client ``resources/updated`` notification. Transports feed
decoded messages to :meth:`MCPServer.handle` together with the
:class:`Session` they arrived on.
"""

from __future__ import annotations

import itertools
import logging
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from . import protocol as P

log = logging.getLogger(__name__)

PROTOCOL_REVISION = "taiji-mcp/1"


class ToolError(Exception):
    """Raised by tool handlers; code and message reach the caller unchanged."""

    def __init__(self, message: str, code: int = P.TOOL_ERROR, data: Any = None):
        super().__init__(message)
        self.code = code
        self.message = message
        self.data = data


class RWLock:
    """Many readers or one writer. Writers are preferred once waiting."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._waiting_writers = 0

    def acquire_read(self):
        with self._cond:
            while self._writer or self._waiting_writers:
                self._cond.wait()
            self._readers += 1

    def release_read(self):
        with self._cond:
            self._readers -= 1
            if not self._readers:
                self._cond.notify_all()

    def acquire_write(self):
        with self._cond:
            self._waiting_writers += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._waiting_writers -= 1
            self._writer = True

    def release_write(self):
        with self._cond:
            self._writer = False
            self._cond.notify_all()


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    input_schema: dict
    server_id: str
    description: str = ""

    def to_json(self) -> dict:
        return {"name": self.name, "inputSchema": self.input_schema,
                "serverId": self.server_id, "description": self.description}


@dataclass
class _Tool:
    descriptor: ToolDescriptor
    handler: Callable[[dict, "ToolContext"], Any]
    exclusive: bool = False


@dataclass(frozen=True)
class Subscription:
    resource_uri: str
    subscriber: str
    created_at: float

    def to_json(self) -> dict:
        return {"uri": self.resource_uri, "subscriber": self.subscriber, "createdAt": self.created_at}


class Session:
    """One client connection as seen by the server.

    ``send`` writes a message to the client; transports serialize writes.
    """

    _ids = itertools.count(1)

    def __init__(self, send: Callable[[P.Message], None], session_id: Optional[str] = None):
        self.id = session_id or f"s{next(self._ids)}"
        self._send = send
        self._write_lock = threading.Lock()
        self._pending: dict[P.Id, Future] = {}
        self._req_ids = itertools.count(1)
        self.closed = False

    def send(self, msg: P.Message) -> None:
        with self._write_lock:
            self._send(msg)

    def request(self, method: str, params: Any, timeout: float = 30.0) -> Any:
        """Send a server-to-client request and wait for its response."""
        req_id = f"srv-{next(self._req_ids)}"
        fut: Future = Future()
        self._pending[req_id] = fut
        self.send(P.Request(req_id, method, params))
        try:
            resp: P.Response = fut.result(timeout=timeout)
        finally:
            self._pending.pop(req_id, None)
        if resp.error is not None:
            raise ToolError(resp.error.message, resp.error.code, resp.error.data)
        return resp.result

    def resolve(self, resp: P.Response) -> bool:
        fut = self._pending.get(resp.id)
        if fut is None:
            return False
        fut.set_result(resp)
        return True


@dataclass
class ToolContext:
    server: "MCPServer"
    session: Optional[Session]

    def request_client(self, method: str, params: Any, timeout: float = 30.0) -> Any:
        if self.session is None:
            raise ToolError("no client session for callback", P.INTERNAL_ERROR)
        return self.session.request(method, params, timeout)


class MCPServer:
    def __init__(self, server_id: str, description: str = ""):
        self.server_id = server_id
        self.description = description
        self._tools: dict[str, _Tool] = {}
        self._resources: dict[str, dict] = {}
        self._subs: dict[str, dict[str, tuple[Subscription, Session]]] = {}
        self._subs_lock = threading.Lock()
        self._versions: dict[str, int] = {}
        self._rw = RWLock()
        self.sessions: dict[str, Session] = {}

    # -- registration
    def add_tool(self, name: str, handler, input_schema: Optional[dict] = None,
                 description: str = "", exclusive: bool = False) -> ToolDescriptor:
        if name in self._tools:
            raise ValueError(f"tool {name!r} already registered on {self.server_id}")
        desc = ToolDescriptor(name, input_schema or {"type": "object"}, self.server_id, description)
        self._tools[name] = _Tool(desc, handler, exclusive)
        return desc

    def tool(self, name: str, input_schema: Optional[dict] = None, description: str = "",
             exclusive: bool = False):
        def deco(fn):
            self.add_tool(name, fn, input_schema, description or (fn.__doc__ or "").strip(), exclusive)
            return fn
        return deco

    def add_resource(self, uri: str, name: str = "", description: str = "") -> None:
        self._resources[uri] = {"uri": uri, "name": name or uri, "description": description}

    @property
    def tools(self) -> list[ToolDescriptor]:
        return [t.descriptor for t in self._tools.values()]

    # -- sessions
    def open_session(self, send: Callable[[P.Message], None], session_id: Optional[str] = None) -> Session:
        s = Session(send, session_id)
        self.sessions[s.id] = s
        return s

    def close_session(self, session: Session) -> None:
        session.closed = True
        self.sessions.pop(session.id, None)
        with self._subs_lock:
            for subs in self._subs.values():
                subs.pop(session.id, None)

    # -- subscriptions
    def subscribe(self, uri: str, session: Session) -> Subscription:
        if uri not in self._resources:
            raise ToolError(f"unknown resource {uri!r}", P.INVALID_PARAMS)
        with self._subs_lock:
            subs = self._subs.setdefault(uri, {})
            if session.id in subs:
                return subs[session.id][0]
            sub = Subscription(uri, session.id, time.time())
            subs[session.id] = (sub, session)
            return sub

    def unsubscribe(self, uri: str, session: Session) -> bool:
        with self._subs_lock:
            return self._subs.get(uri, {}).pop(session.id, None) is not None

    def subscribers(self, uri: str) -> list[str]:
        with self._subs_lock:
            return sorted(self._subs.get(uri, {}))

    def resource_changed(self, uri: str, change: Optional[dict] = None) -> int:
        """Notify every subscriber of ``uri`` once; returns deliveries made.

        ``version`` counts changes per resource, so a redelivered
        notification can be told apart from a new change.
        """
        with self._subs_lock:
            targets = [s for _, s in self._subs.get(uri, {}).values()]
            version = self._versions.get(uri, 0) + 1
            self._versions[uri] = version
        params = {"uri": uri, "version": version}
        if change is not None:
            params["change"] = change
        sent = 0
        for session in targets:
            if session.closed:
                continue
            try:
                session.send(P.Notification("resources/updated", params))
                sent += 1
            except OSError:
                log.warning("dropping notification for closed session %s", session.id)
        return sent

    # -- dispatch
    def handle(self, msg: P.Message, session: Optional[Session] = None) -> Optional[P.Response]:
        if isinstance(msg, P.Response):
            if session is None or not session.resolve(msg):
                log.warning("%s: orphan response id=%r", self.server_id, msg.id)
            return None
        if isinstance(msg, P.Notification):
            return None
        try:
            result = self._dispatch(msg, session)
        except ToolError as exc:
            return P.Response(msg.id, error=P.RpcError(exc.code, exc.message, exc.data))
        except Exception as exc:  # handler bug: report, keep serving
            log.exception("%s: %s failed", self.server_id, msg.method)
            return P.Response(msg.id, error=P.RpcError(P.INTERNAL_ERROR, f"{type(exc).__name__}: {exc}"))
        return P.Response(msg.id, result=result)

    def _dispatch(self, req: P.Request, session: Optional[Session]) -> Any:
        m = req.method
        params = req.params if isinstance(req.params, dict) else {}
        if m == "initialize":
            return {"protocolVersion": PROTOCOL_REVISION,
                    "serverInfo": {"name": self.server_id, "description": self.description},
                    "capabilities": {"tools": {}, "resources": {"subscribe": True}}}
        if m == "tools/list":
            return {"tools": [t.to_json() for t in self.tools]}
        if m == "tools/call":
            return self._call_tool(params, session)
        if m == "resources/list":
            return {"resources": [self._resources[u] for u in sorted(self._resources)]}
        if m == "resources/subscribe":
            if session is None:
                raise ToolError("subscriptions need a session", P.INVALID_REQUEST)
            return self.subscribe(self._uri(params), session).to_json()
        if m == "resources/unsubscribe":
            if session is None:
                raise ToolError("subscriptions need a session", P.INVALID_REQUEST)
            return {"removed": self.unsubscribe(self._uri(params), session)}
        raise ToolError(f"method not found: {m}", P.METHOD_NOT_FOUND)

    @staticmethod
    def _uri(params: dict) -> str:
        uri = params.get("uri")
        if not isinstance(uri, str):
            raise ToolError("missing uri", P.INVALID_PARAMS)
        return uri

    def _call_tool(self, params: dict, session: Optional[Session]) -> Any:
        name = params.get("name")
        tool = self._tools.get(name)
        if tool is None:
            raise ToolError(f"unknown tool {name!r}", P.METHOD_NOT_FOUND)
        args = params.get("arguments", {})
        if not isinstance(args, dict):
            raise ToolError("arguments must be an object", P.INVALID_PARAMS)
        ctx = ToolContext(self, session)
        if tool.exclusive:
            self._rw.acquire_write()
            try:
                return tool.handler(args, ctx)
            finally:
                self._rw.release_write()
        self._rw.acquire_read()
        try:
            return tool.handler(args, ctx)
        finally:
            self._rw.release_read()

    def call_local(self, name: str, args: dict) -> Any:
        """Invoke a tool in-process, bypassing any transport."""
        resp = self.handle(P.Request(0, "tools/call", {"name": name, "arguments": args}))
        if resp.error is not None:
            raise ToolError(resp.error.message, resp.error.code, resp.error.data)
        return resp.result
