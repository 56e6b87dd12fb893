"""YAML configuration: servers, planner defaults, loop thresholds, host.

Example::

    servers:
      - id: rel-server
        kind: relational
        lake: ./lake
      - id: image-server
        kind: image
        labels: ./lake/photos.labels.json
        noise: 0.0
        seed: 0
        address: http://127.0.0.1:8765     # omit for in-process
      - id: vector-server
        kind: vector
        index_dir: ./vectors
    planner: {sample_size: 32, seed: 0, ttl_seconds: 600, profiles: ./profiles.jsonl}
    loop: {threshold: 0.7, budget: 4, delta: 0.1}
    host: {workers: 8, call_timeout: 60, query_log: ./query_log.jsonl, agent: stub}

Relative paths resolve against the config file's directory. ``address`` is
``inproc`` (default), ``http://host:port`` or ``stdio:<command line>``.
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import yaml

from .loop import LoopConfig
from .mcp.client import MCPClient
from .mcp.server import MCPServer
from .mcp.transport import HttpTransport, inprocess_pipe, subprocess_pipe
from .planner import DEFAULT_SAMPLE_SIZE, DEFAULT_TTL_SECONDS, CostModel

SERVER_KINDS = ("relational", "image", "vector")


class ConfigError(ValueError):
    pass


@dataclass
class ServerConfig:
    id: str
    kind: str
    address: str = "inproc"
    options: dict = field(default_factory=dict)

    def path(self, key: str, base: Path) -> Optional[Path]:
        v = self.options.get(key)
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else base / p


@dataclass
class Config:
    servers: list[ServerConfig]
    planner: dict = field(default_factory=dict)
    loop: LoopConfig = LoopConfig()
    host: dict = field(default_factory=dict)
    base: Path = Path(".")

    def server(self, key: str) -> ServerConfig:
        for s in self.servers:
            if key in (s.id, s.kind):
                return s
        raise ConfigError(f"no server {key!r} in config")

    def resolve(self, value: Optional[str]) -> Optional[Path]:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base / p


def parse_config(doc: dict, base: Path = Path(".")) -> Config:
    if not isinstance(doc, dict) or not isinstance(doc.get("servers"), list):
        raise ConfigError("config needs a 'servers' list")
    servers = []
    for s in doc["servers"]:
        s = dict(s)
        kind = s.pop("kind", None)
        if kind not in SERVER_KINDS:
            raise ConfigError(f"server kind must be one of {SERVER_KINDS}, got {kind!r}")
        sid = s.pop("id", {"relational": "rel-server", "image": "image-server", "vector": "vector-server"}[kind])
        servers.append(ServerConfig(sid, kind, s.pop("address", "inproc"), s))
    loop = LoopConfig.from_dict(doc["loop"]) if doc.get("loop") else LoopConfig()
    return Config(servers, dict(doc.get("planner") or {}), loop, dict(doc.get("host") or {}), base)


def load_config(path: str | Path) -> Config:
    p = Path(path)
    try:
        doc = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return parse_config(doc, p.resolve().parent)


def build_server(sc: ServerConfig, config: Config) -> MCPServer:
    """Instantiate the server a config entry describes (in this process)."""
    from .embedding import HashingEmbedder
    from .servers.relational import make_relational_server
    from .servers.storage import LakeStore
    from .servers.vector import VectorService, make_vector_server
    from .servers.vision import LabelOracle, NoisyOracle, RemoteModel, make_image_server

    base = config.base
    if sc.kind == "relational":
        lake = sc.path("lake", base)
        if lake is None or not lake.exists():
            raise ConfigError(f"{sc.id}: lake directory {lake} not found")
        return make_relational_server(LakeStore(lake), sc.id)
    if sc.kind == "image":
        o = sc.options
        if o.get("endpoint"):
            provider = RemoteModel(o["endpoint"], o.get("api_key"))
        else:
            labels = sc.path("labels", base)
            if labels is None or not labels.exists():
                raise ConfigError(f"{sc.id}: label file {labels} not found")
            eps = float(o.get("noise", 0.0))
            cost = float(o.get("cost_per_item", 0.0))
            oracle = LabelOracle.from_file(labels, cost)
            provider = NoisyOracle(oracle.labels, eps, int(o.get("seed", 0)), cost) if eps > 0 else oracle
        return make_image_server(provider, sc.id, tuple(o.get("datasets", ("photos",))))
    emb = sc.options.get("embedder", {})
    service = VectorService(HashingEmbedder(**emb) if emb else None)
    idx_dir = sc.path("index_dir", base)
    if idx_dir is not None and idx_dir.exists():
        service.load(idx_dir)
    return make_vector_server(service, sc.id, config.loop)


def connect(sc: ServerConfig, config: Config, handlers: Optional[dict[str, Callable[[Any], Any]]] = None,
            timeout: float = 60.0) -> MCPClient:
    addr = sc.address
    if addr == "inproc":
        transport = inprocess_pipe(build_server(sc, config))
    elif addr.startswith(("http://", "https://")):
        transport = HttpTransport(addr, timeout=timeout)
    elif addr.startswith("stdio:"):
        transport = subprocess_pipe(shlex.split(addr[len("stdio:"):]))
    else:
        raise ConfigError(f"{sc.id}: unsupported address {addr!r}")
    client = MCPClient(transport, timeout=timeout, handlers=handlers, name=f"host->{sc.id}")
    client.initialize()
    return client


def cost_model(config: Config) -> CostModel:
    p = config.planner
    kw = {"ttl_seconds": float(p.get("ttl_seconds", DEFAULT_TTL_SECONDS))}
    if "join_selectivity" in p:
        kw["join_selectivity"] = float(p["join_selectivity"])
    path = config.resolve(p.get("profiles"))
    if path is not None and path.exists():
        return CostModel.load(path, **kw)
    return CostModel(**kw)


def build_host(config: Config, agent=None, clarify=None):
    """Connect to every configured server and return a ready Host."""
    from .host import Catalog, Host, HostSettings, ServerEntry
    from .querylog import QueryLog

    h = config.host
    settings = HostSettings(workers=int(h.get("workers", 8)),
                            sample_size=int(config.planner.get("sample_size", DEFAULT_SAMPLE_SIZE)),
                            seed=int(config.planner.get("seed", 0)),
                            optimize=bool(config.planner.get("optimize", True)),
                            call_timeout=float(h.get("call_timeout", 60.0)))
    box: dict = {}
    handlers = {"host/clarify": lambda params: box["host"].answer_clarify(params)}
    entries = {}
    try:
        for sc in config.servers:
            entries[sc.id] = ServerEntry(sc.id, sc.address, connect(sc, config, handlers, settings.call_timeout))
        catalog = Catalog.discover(entries)
    except Exception:
        for e in entries.values():
            e.client.close()
        raise
    qlog = QueryLog(config.resolve(h.get("query_log")))
    host = Host(catalog, cost_model(config), agent, settings, qlog, clarify)
    box["host"] = host
    return host
