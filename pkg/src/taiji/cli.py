"""Command line entry point (``taiji``)."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

DEFAULT_CONFIG = "taiji.yaml"


def _config_path(arg: Optional[str]) -> Path:
    p = Path(arg or os.environ.get("TAIJI_CONFIG", DEFAULT_CONFIG))
    if not p.exists():
        raise SystemExit(f"taiji: config file {p} not found (use --config or TAIJI_CONFIG)")
    return p


def _agent(name: Optional[str]):
    from .agents import RemoteAgent, RuleStub
    if name is None:
        return None
    return RuleStub() if name == "stub" else RemoteAgent()


def _cell(v) -> str:
    return "" if v is None else str(v)


def cmd_query(args) -> int:
    from .config import build_host, load_config
    config = load_config(_config_path(args.config))
    agent = _agent(args.agent or ("stub" if args.q else None))
    with build_host(config, agent) as host:
        if args.e is not None:
            rs, trace = host.execute(args.e, mode="expression", optimize=not args.no_optimize)
        else:
            rs, trace = host.execute(args.q, mode="nl", optimize=not args.no_optimize)
    if args.json:
        doc = rs.to_json()
        if args.trace:
            doc["trace"] = trace.to_json()
        print(json.dumps(doc, indent=2))
        return 0
    print(f"-- {trace.expression}")
    print("\t".join(rs.columns))
    for row in rs.rows:
        print("\t".join(_cell(v) for v in row))
    print(f"-- {len(rs)} rows in {trace.total_ms:.1f} ms")
    if args.trace:
        for node, nt in trace.nodes.items():
            print(f"-- {node:<8}{nt.server:<16}{nt.ms:>10.1f} ms  in={nt.card_in} out={nt.card_out}")
    return 0


def cmd_serve(args) -> int:
    from .config import build_server, load_config
    from .mcp.transport import make_http_server, serve_stdio
    config = load_config(_config_path(args.config))
    server = build_server(config.server(args.kind), config)
    if args.http:
        host, _, port = args.http.rpartition(":")
        httpd = make_http_server(server, host or "127.0.0.1", int(port))
        print(f"serving {server.server_id} on http://{httpd.server_address[0]}:{httpd.server_address[1]}",
              file=sys.stderr, flush=True)
        try:
            httpd.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            httpd.server_close()
    else:
        serve_stdio(server)
    return 0


def cmd_catalog(args) -> int:
    from .config import build_host, load_config
    config = load_config(_config_path(args.config))
    with build_host(config) as host:
        cat = host.catalog
        if args.json:
            print(json.dumps({"datasets": [d.to_json() for d in cat.datasets.values()],
                              "servers": {s.id: {"address": s.address, "tools": sorted(s.tools)}
                                          for s in cat.servers.values()}}, indent=2))
            return 0
        for sid, s in cat.servers.items():
            print(f"server {sid} ({s.address}): {', '.join(sorted(s.tools))}")
        for ds in cat.datasets.values():
            cols = ", ".join(f"{c}:{t}" for c, t in ds.schema)
            print(f"dataset {ds.id} [{ds.modality.value}] {ds.uri} ({cols})")
    return 0


def cmd_augment(args) -> int:
    from .augmentor import Gazetteer, KnowledgeCatalog, SourcePolicy, augment, load_corpus
    docs = load_corpus(args.corpus)
    gazetteer = Gazetteer(json.loads(Path(args.gazetteer).read_text(encoding="utf-8")))
    policy = SourcePolicy.from_json(json.loads(Path(args.policy).read_text(encoding="utf-8"))) \
        if args.policy else SourcePolicy()
    catalog = KnowledgeCatalog(args.out) if args.out else None
    report = augment(docs, gazetteer, policy, catalog, tau_minhash=args.tau, seed=args.seed)
    if catalog is not None:
        catalog.save()
    print(json.dumps(report.summary(), indent=2))
    return 0


def cmd_jobs(args) -> int:
    from .refresher import Outbox
    box = Outbox(args.outbox)
    if args.action == "list":
        jobs = box.pending()
    else:
        jobs = box.drain()
    for job in jobs:
        print(json.dumps(job.to_json(), sort_keys=True))
    print(f"{len(jobs)} job(s) {'pending' if args.action == 'list' else 'drained'}", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    from . import bench
    spec = bench.WorkloadSpec.load(args.spec) if args.spec else bench.WorkloadSpec()
    spec = bench.with_noise(spec, args.noise if args.noise is not None else spec.noise, args.seed)
    out = Path(args.out)
    fixture = bench.generate_fixture(spec, out / "fixture")
    report = bench.run(spec, fixture.directory, raw_dir=out / "raw",
                       agent=_agent("stub") if args.nl else None)
    bench.write_report(report, out)
    print(report.table())
    return 0 if report.complete else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="taiji", description="Federated multi-modal query engine.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    q = sub.add_parser("query", help="run one query")
    g = q.add_mutually_exclusive_group(required=True)
    g.add_argument("-e", metavar="EXPR", help="operator expression")
    g.add_argument("-q", metavar="TEXT", help="natural-language question")
    q.add_argument("--agent", choices=("stub", "remote"), help="translator for -q (default stub)")
    q.add_argument("--config", help=f"config file (default ${{TAIJI_CONFIG}} or {DEFAULT_CONFIG})")
    q.add_argument("--no-optimize", action="store_true", help="run the plan as written")
    q.add_argument("--json", action="store_true", help="print the result set as JSON")
    q.add_argument("--trace", action="store_true", help="include the per-node trace")
    q.set_defaults(func=cmd_query)

    s = sub.add_parser("serve", help="run one configured server")
    s.add_argument("kind", help="server id or kind (relational, image, vector)")
    s.add_argument("--config")
    s.add_argument("--http", metavar="HOST:PORT", help="serve over HTTP instead of stdio")
    s.set_defaults(func=cmd_serve)

    c = sub.add_parser("catalog", help="list servers, tools and datasets")
    c.add_argument("--config")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_catalog)

    a = sub.add_parser("augment", help="dedup, tag and corroborate a document corpus")
    a.add_argument("--corpus", required=True, help="directory of JSON documents")
    a.add_argument("--gazetteer", required=True, help="JSON object: entity name -> type")
    a.add_argument("--policy", help="JSON source policy (related pairs, credibility)")
    a.add_argument("--out", help="knowledge catalog (JSON lines) to add retained units to")
    a.add_argument("--tau", type=float, default=0.8, help="MinHash Jaccard threshold")
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_augment)

    j = sub.add_parser("jobs", help="inspect or drain the refresh job outbox")
    j.add_argument("action", choices=("list", "drain"))
    j.add_argument("--outbox", default="refresh_jobs.jsonl")
    j.set_defaults(func=cmd_jobs)

    b = sub.add_parser("bench", help="generate the fixture and run the workload")
    b.add_argument("--spec", help="workload spec (YAML/JSON)")
    b.add_argument("--noise", type=float, help="label flip probability")
    b.add_argument("--seed", type=int)
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--nl", action="store_true", help="translate questions with the rule stub")
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        if args.verbose:
            raise
        print(f"taiji: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
