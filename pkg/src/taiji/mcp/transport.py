"""Pipe (newline-delimited JSON) and HTTP transports.

Client-side transports share one small interface: ``start(on_message)``
registers the callback that receives every raw inbound message, ``send``
writes one encoded message, ``close`` releases resources.
"""

from __future__ import annotations

import logging
import os
import queue
import subprocess
import sys
import threading
import urllib.error
import urllib.request
import uuid
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import BinaryIO, Callable, Optional, Sequence

from . import protocol as P
from .server import MCPServer

log = logging.getLogger(__name__)

OnMessage = Callable[[bytes], None]


class TransportClosed(ConnectionError):
    pass


# ------------------------------------------------------------------ pipe

def _read_lines(stream: BinaryIO):
    while True:
        line = stream.readline()
        if not line:
            return
        line = line.strip()
        if line:
            yield line


def serve_stream(server: MCPServer, reader: BinaryIO, writer: BinaryIO, workers: int = 8) -> None:
    """Serve one connection until ``reader`` hits EOF.

    Requests run on a worker pool so slow tools do not block the reader
    (which must stay free to deliver responses to server-initiated
    requests). Writes are serialized by the session.
    """

    def write(msg: P.Message) -> None:
        writer.write(P.encode(msg) + b"\n")
        writer.flush()

    session = server.open_session(write)
    pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix=f"{server.server_id}-rpc")

    def run(msg: P.Message) -> None:
        resp = server.handle(msg, session)
        if resp is not None:
            try:
                session.send(resp)
            except (OSError, ValueError):
                log.debug("client went away before response %r", resp.id)

    try:
        for line in _read_lines(reader):
            try:
                msg = P.decode(line)
            except P.ProtocolError as exc:
                session.send(P.Response(exc.id, error=P.RpcError(exc.code, str(exc))))
                continue
            if isinstance(msg, P.Request):
                pool.submit(run, msg)
            else:
                server.handle(msg, session)
    finally:
        pool.shutdown(wait=True)
        server.close_session(session)


class StreamTransport:
    """Client end of a newline-delimited JSON byte stream pair."""

    def __init__(self, reader: BinaryIO, writer: BinaryIO, on_close: Optional[Callable[[], None]] = None):
        self._reader = reader
        self._writer = writer
        self._on_close = on_close
        self._thread: Optional[threading.Thread] = None
        self._lock = threading.Lock()
        self.closed = False

    def start(self, on_message: OnMessage) -> None:
        def loop():
            try:
                for line in _read_lines(self._reader):
                    on_message(line)
            except (OSError, ValueError):
                pass
            finally:
                self.closed = True

        self._thread = threading.Thread(target=loop, name="mcp-stream-reader", daemon=True)
        self._thread.start()

    def send(self, data: bytes) -> None:
        if self.closed:
            raise TransportClosed("stream closed")
        with self._lock:
            try:
                self._writer.write(data + b"\n")
                self._writer.flush()
            except (OSError, ValueError) as exc:
                self.closed = True
                raise TransportClosed(str(exc)) from exc

    def close(self) -> None:
        if not self.closed:
            self.closed = True
        try:
            self._writer.close()
        except OSError:
            pass
        if self._on_close:
            self._on_close()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout=5)


def inprocess_pipe(server: MCPServer) -> StreamTransport:
    """Connect to ``server`` through OS pipes, serving on a background thread."""
    c2s_r, c2s_w = os.pipe()
    s2c_r, s2c_w = os.pipe()
    srv_in, srv_out = os.fdopen(c2s_r, "rb"), os.fdopen(s2c_w, "wb")

    def run():
        try:
            serve_stream(server, srv_in, srv_out)
        finally:
            srv_in.close()
            try:
                srv_out.close()
            except OSError:
                pass

    t = threading.Thread(target=run, name=f"{server.server_id}-serve", daemon=True)
    t.start()
    return StreamTransport(os.fdopen(s2c_r, "rb"), os.fdopen(c2s_w, "wb"), on_close=lambda: t.join(timeout=5))


def subprocess_pipe(argv: Sequence[str], env: Optional[dict] = None) -> StreamTransport:
    """Spawn a server process speaking on stdin/stdout."""
    proc = subprocess.Popen(list(argv), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                            env=env, bufsize=0)

    def stop():
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()

    return StreamTransport(proc.stdout, proc.stdin, on_close=stop)


def serve_stdio(server: MCPServer) -> None:
    serve_stream(server, sys.stdin.buffer, sys.stdout.buffer)


# ------------------------------------------------------------------ http

class _HttpSessions:
    def __init__(self, server: MCPServer):
        self.server = server
        self.lock = threading.Lock()
        self.sessions = {}
        self.outboxes: dict[str, queue.Queue] = {}

    def get(self, session_id: str):
        with self.lock:
            if session_id not in self.sessions:
                box: queue.Queue = queue.Queue()
                self.outboxes[session_id] = box
                self.sessions[session_id] = self.server.open_session(
                    lambda msg, box=box: box.put(P.encode(msg)), session_id)
            return self.sessions[session_id], self.outboxes[session_id]


def make_http_server(server: MCPServer, host: str = "127.0.0.1", port: int = 0,
                     poll_timeout: float = 0.5) -> ThreadingHTTPServer:
    """HTTP endpoint: ``POST /rpc`` carries one message per body; server-to-
    client traffic (notifications, callbacks) is drained by ``GET /events``.
    Sessions are keyed by the ``Mcp-Session-Id`` header."""
    sessions = _HttpSessions(server)

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # keep test output quiet
            log.debug("http: " + fmt, *args)

        def _session(self):
            sid = self.headers.get("Mcp-Session-Id") or "anonymous"
            return sessions.get(sid)

        def _reply(self, status: int, body: bytes = b"", ctype: str = "application/json"):
            self.send_response(status)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            if body:
                self.wfile.write(body)

        def do_POST(self):
            if self.path != "/rpc":
                return self._reply(404)
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length)
            session, _ = self._session()
            try:
                msg = P.decode(raw)
            except P.ProtocolError as exc:
                return self._reply(200, P.encode(P.Response(exc.id, error=P.RpcError(exc.code, str(exc)))))
            resp = server.handle(msg, session)
            if resp is None:
                return self._reply(202)
            self._reply(200, P.encode(resp))

        def do_GET(self):
            if not self.path.startswith("/events"):
                return self._reply(404)
            _, box = self._session()
            out = []
            try:
                out.append(box.get(timeout=poll_timeout))
                while True:
                    out.append(box.get_nowait())
            except queue.Empty:
                pass
            self._reply(200, b"\n".join(out), "application/x-ndjson")

        def do_DELETE(self):
            session, _ = self._session()
            server.close_session(session)
            self._reply(204)

    httpd = ThreadingHTTPServer((host, port), Handler)
    httpd.daemon_threads = True
    return httpd


def serve_http_background(server: MCPServer, host: str = "127.0.0.1", port: int = 0):
    httpd = make_http_server(server, host, port)
    t = threading.Thread(target=httpd.serve_forever, name=f"{server.server_id}-http", daemon=True)
    t.start()
    return httpd, f"http://{httpd.server_address[0]}:{httpd.server_address[1]}"


class HttpTransport:
    """Client end of the HTTP transport.

    Responses come back in the POST reply; a poller thread fetches
    server-initiated messages from ``/events``.
    """

    def __init__(self, base_url: str, session_id: Optional[str] = None, timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.session_id = session_id or uuid.uuid4().hex
        self.timeout = timeout
        self.closed = False
        self._on_message: Optional[OnMessage] = None
        self._poller: Optional[threading.Thread] = None

    def _req(self, method: str, path: str, body: Optional[bytes] = None) -> bytes:
        req = urllib.request.Request(self.base_url + path, data=body, method=method,
                                     headers={"Mcp-Session-Id": self.session_id,
                                              "Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.read()
        except (urllib.error.URLError, OSError) as exc:
            raise TransportClosed(f"{self.base_url}: {exc}") from exc

    def start(self, on_message: OnMessage) -> None:
        self._on_message = on_message

        def poll():
            while not self.closed:
                try:
                    body = self._req("GET", "/events")
                except TransportClosed:
                    if self.closed:
                        return
                    threading.Event().wait(0.2)
                    continue
                for line in body.split(b"\n"):
                    if line.strip():
                        on_message(line)

        self._poller = threading.Thread(target=poll, name="mcp-http-poller", daemon=True)
        self._poller.start()

    def send(self, data: bytes) -> None:
        if self.closed:
            raise TransportClosed("transport closed")
        body = self._req("POST", "/rpc", data)
        if body and self._on_message is not None:
            self._on_message(body)

    def close(self) -> None:
        if self.closed:
            return
        try:
            self._req("DELETE", "/session")
        except TransportClosed:
            pass
        self.closed = True
        if self._poller is not None:
            self._poller.join(timeout=5)
