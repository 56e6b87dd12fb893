"""JSON-RPC 2.0 message model and wire codec."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional, Union

VERSION = "2.0"

PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602
INTERNAL_ERROR = -32603
# Application range.
TOOL_ERROR = -32000
TIMEOUT = -32001
TRANSPORT_ERROR = -32002

Id = Union[int, str]


class ProtocolError(ValueError):
    """A message could not be decoded into a valid JSON-RPC envelope."""

    def __init__(self, code: int, message: str, id: Optional[Id] = None):
        super().__init__(message)
        self.code = code
        self.id = id


@dataclass(frozen=True)
class RpcError:
    code: int
    message: str
    data: Any = None

    def to_json(self) -> dict:
        doc = {"code": self.code, "message": self.message}
        if self.data is not None:
            doc["data"] = self.data
        return doc


@dataclass(frozen=True)
class Request:
    id: Id
    method: str
    params: Any = field(default_factory=dict)


@dataclass(frozen=True)
class Response:
    id: Optional[Id]
    result: Any = None
    error: Optional[RpcError] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass(frozen=True)
class Notification:
    method: str
    params: Any = field(default_factory=dict)


Message = Union[Request, Response, Notification]


def to_json(msg: Message) -> dict:
    if isinstance(msg, Request):
        return {"jsonrpc": VERSION, "id": msg.id, "method": msg.method, "params": msg.params}
    if isinstance(msg, Notification):
        return {"jsonrpc": VERSION, "method": msg.method, "params": msg.params}
    if isinstance(msg, Response):
        doc = {"jsonrpc": VERSION, "id": msg.id}
        if msg.error is not None:
            doc["error"] = msg.error.to_json()
        else:
            doc["result"] = msg.result
        return doc
    raise TypeError(f"not a message: {msg!r}")


def encode(msg: Message) -> bytes:
    """Canonical UTF-8 JSON: sorted keys, no insignificant whitespace."""
    return json.dumps(to_json(msg), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _valid_id(v: Any) -> bool:
    return (isinstance(v, int) and not isinstance(v, bool)) or isinstance(v, str)


def from_json(doc: Any) -> Message:
    if not isinstance(doc, dict):
        raise ProtocolError(INVALID_REQUEST, "message must be a JSON object")
    msg_id = doc.get("id")
    if "jsonrpc" not in doc:
        raise ProtocolError(INVALID_REQUEST, "missing jsonrpc version", msg_id)
    if doc["jsonrpc"] != VERSION:
        raise ProtocolError(INVALID_REQUEST, f"unsupported jsonrpc version {doc['jsonrpc']!r}", msg_id)
    if "method" in doc:
        method = doc["method"]
        if not isinstance(method, str):
            raise ProtocolError(INVALID_REQUEST, "method must be a string", msg_id)
        params = doc.get("params", {})
        if "id" in doc:
            if not _valid_id(msg_id):
                raise ProtocolError(INVALID_REQUEST, "id must be an integer or string")
            return Request(msg_id, method, params)
        return Notification(method, params)
    if "result" in doc or "error" in doc:
        if "id" not in doc:
            raise ProtocolError(INVALID_REQUEST, "response without id")
        if "error" in doc and doc["error"] is not None:
            err = doc["error"]
            if not isinstance(err, dict) or "code" not in err or "message" not in err:
                raise ProtocolError(INVALID_REQUEST, "malformed error object", msg_id)
            return Response(msg_id, error=RpcError(int(err["code"]), str(err["message"]), err.get("data")))
        return Response(msg_id, result=doc.get("result"))
    raise ProtocolError(INVALID_REQUEST, "neither request, notification nor response", msg_id)


def decode(data: Union[bytes, str]) -> Message:
    """Parse one complete message. Unknown fields are ignored."""
    try:
        text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
        doc = json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(PARSE_ERROR, f"malformed JSON: {exc}") from None
    return from_json(doc)
