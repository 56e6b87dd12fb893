import sys

import pytest
import yaml

from taiji.bench import WorkloadSpec, generate_fixture
from taiji.config import ConfigError, build_host, cost_model, load_config, parse_config
from taiji.mcp.transport import make_http_server
from taiji.config import build_server


@pytest.fixture(scope="module")
def lake_dir(tmp_path_factory):
    return generate_fixture(WorkloadSpec(rows=600, images_per_row=2), tmp_path_factory.mktemp("cfg")).directory


def test_defaults_and_relative_paths(lake_dir):
    cfg = load_config(lake_dir / "config.yaml")
    assert [s.id for s in cfg.servers] == ["rel-server", "image-server"]
    assert cfg.server("relational").path("lake", cfg.base) == lake_dir / "lake"
    assert cfg.loop.budget >= 1 and cfg.planner["sample_size"] == 32


def test_bad_documents_rejected(tmp_path):
    with pytest.raises(ConfigError):
        parse_config({})
    with pytest.raises(ConfigError):
        parse_config({"servers": [{"kind": "graph"}]})
    (tmp_path / "bad.yaml").write_text("servers: [unclosed")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
    cfg = parse_config({"servers": [{"kind": "relational", "lake": "nope"}]}, tmp_path)
    with pytest.raises(ConfigError):
        build_server(cfg.servers[0], cfg)
    with pytest.raises(ConfigError):
        cfg.server("vector")


def test_loop_section_validated():
    cfg = parse_config({"servers": [], "loop": {"threshold": 0.6, "budget": 2}})
    assert (cfg.loop.threshold, cfg.loop.budget) == (0.6, 2)
    with pytest.raises(ValueError):
        parse_config({"servers": [], "loop": {"budget": 0}})


def test_cost_model_loads_profiles(tmp_path):
    from taiji.planner import CostModel, CostProfile
    m = CostModel()
    m.put(CostProfile("sig", 32, 0.25, 1.5))
    m.save(tmp_path / "p.jsonl")
    cfg = parse_config({"servers": [], "planner": {"profiles": "p.jsonl", "ttl_seconds": 5}}, tmp_path)
    loaded = cost_model(cfg)
    assert loaded.ttl_seconds == 5 and loaded.profiles["sig"].selectivity == 0.25


def run_q1(host, lake_dir):
    import json
    rs, _ = host.execute('scan(furniture) | filter(category == "chair" and title contains "set") | '
                         'join(scan(image), furniture.id == image.fid) | '
                         'sem_match(image, "images with two chairs", 0.5)')
    truth = json.loads((lake_dir / "truth.json").read_text())["truth"]["Q1"]
    return {r[-2].item for r in rs.rows} == set(truth)


def test_in_process_host(lake_dir):
    with build_host(load_config(lake_dir / "config.yaml")) as host:
        assert run_q1(host, lake_dir)


def test_stdio_and_http_servers(lake_dir, tmp_path):
    import threading
    cfg = load_config(lake_dir / "config.yaml")
    httpd = make_http_server(build_server(cfg.server("image"), cfg), "127.0.0.1", 0)
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    doc = yaml.safe_load((lake_dir / "config.yaml").read_text())
    doc["servers"][0]["address"] = f"stdio:{sys.executable} -m taiji.cli serve relational --config " \
                                   f"{lake_dir / 'config.yaml'}"
    doc["servers"][1]["address"] = f"http://127.0.0.1:{httpd.server_address[1]}"
    (lake_dir / "remote.yaml").write_text(yaml.safe_dump(doc))
    try:
        with build_host(load_config(lake_dir / "remote.yaml")) as host:
            assert run_q1(host, lake_dir)
    finally:
        httpd.shutdown()
        httpd.server_close()


def test_unsupported_address(lake_dir, tmp_path):
    doc = yaml.safe_load((lake_dir / "config.yaml").read_text())
    doc["servers"][0]["address"] = "carrier-pigeon://coop"
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(doc))
    cfg = load_config(tmp_path / "c.yaml")
    cfg.base = lake_dir
    with pytest.raises(ConfigError):
        build_host(cfg)
