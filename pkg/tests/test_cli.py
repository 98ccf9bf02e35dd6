import argparse
import json
import os
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import httpx
import jsonschema
import pytest

from aasrt.casestudy import SAMPLE_DELTA, build_case_study_package
from aasrt.cli import DEFAULTS, EXIT_CONFIG, EXIT_NETWORK, EXIT_OK, EXIT_VALIDATION, OUTPUT_SCHEMA, main, resolve_config
from aasrt.aasx import write_package
from aasrt.errors import ConfigError
from helpers import context, data_submodel, package_bytes, spec_submodel

SAMPLES = Path(__file__).resolve().parent.parent / "samples"


def run_json(capsys, *argv):
    code = main([*argv, "--json"])
    doc = json.loads(capsys.readouterr().out)
    jsonschema.validate(doc, OUTPUT_SCHEMA)
    assert doc["exitCode"] == code
    return code, doc


def test_pack_sample_matches_builder(tmp_path, capsys):
    out = tmp_path / "pkg.aasx"
    code, doc = run_json(capsys, "pack", str(SAMPLES / "osaca-milling"), "-o", str(out))
    assert code == EXIT_OK and doc["ok"]
    assert out.read_bytes() == write_package(build_case_study_package(SAMPLE_DELTA))
    assert out.read_bytes() == (SAMPLES / "osaca-milling.aasx").read_bytes()


def test_pack_errors(tmp_path, capsys):
    assert run_json(capsys, "pack", str(tmp_path / "missing"), "-o", str(tmp_path / "x"))[0] == EXIT_CONFIG
    empty = tmp_path / "empty"
    empty.mkdir()
    code, doc = run_json(capsys, "pack", str(empty), "-o", str(tmp_path / "x"))
    assert code == EXIT_VALIDATION and doc["error"]["code"] == "MissingManifest"


def test_validate(tmp_path, capsys):
    assert run_json(capsys, "validate", str(SAMPLES / "osaca-milling.aasx"))[0] == EXIT_OK
    bad = tmp_path / "bad.aasx"
    bad.write_bytes(package_bytes(spec_submodel("svc", ["onDemand"], inputs={})))
    code, doc = run_json(capsys, "validate", str(bad))
    assert code == EXIT_VALIDATION and doc["result"]["findings"][0]["code"] == "MissingContext"
    junk = tmp_path / "junk.aasx"
    junk.write_bytes(b"junk")
    assert run_json(capsys, "validate", str(junk))[1]["error"]["code"] == "NotAZip"


def test_human_output(capsys):
    assert main(["validate", str(SAMPLES / "osaca-milling.aasx")]) == EXIT_OK
    assert '"errors": 0' in capsys.readouterr().out


def test_network_error(capsys):
    port = free_port()
    code, doc = run_json(capsys, "instances", "--server", f"http://127.0.0.1:{port}", "--timeout", "2")
    assert code == EXIT_NETWORK and doc["error"]["code"] == "NetworkError"
    assert run_json(capsys, "instances", "--server", "ftp://x")[0] == EXIT_CONFIG


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"grace": 7, "tick_interval": 2, "store": str(tmp_path / "s")}))
    args = argparse.Namespace(**{k: None for k in DEFAULTS}, config=str(cfg_file))
    cfg = resolve_config(args, environ={"AASRT_GRACE": "3"})
    assert (cfg["grace"], cfg["tick_interval"], cfg["log_level"]) == (3.0, 2.0, "INFO")
    args.grace = 1.0
    assert resolve_config(args, environ={"AASRT_GRACE": "3"})["grace"] == 1.0
    assert resolve_config(args, environ={})["api_base"] == "http://127.0.0.1:8080"


@pytest.mark.parametrize(
    "override",
    [{"listen": "nope"}, {"listen": "h:70000"}, {"engine": "podman"}, {"grace": "-1"}, {"log_level": "LOUD"},
     {"engine": "docker", "engine_endpoint": "ftp://x"}],
)
def test_config_rejects(tmp_path, override):
    args = argparse.Namespace(**{k: None for k in DEFAULTS}, config=None)
    for k, v in {"store": str(tmp_path / "s"), **override}.items():
        setattr(args, k, v)
    with pytest.raises(ConfigError):
        resolve_config(args, environ={})


def test_unknown_config_key(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text('{"colour": "red"}')
    args = argparse.Namespace(**{k: None for k in DEFAULTS}, config=str(cfg_file))
    with pytest.raises(ConfigError, match="colour"):
        resolve_config(args, environ={})


def test_serve_bad_listen(tmp_path, capsys):
    code, doc = run_json(capsys, "serve", "--listen", "nonsense", "--store", str(tmp_path))
    assert code == EXIT_CONFIG and doc["error"]["code"] == "ConfigError"


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def server(tmp_path):
    port = free_port()
    env = {**os.environ, "PYTHONPATH": str(Path(__file__).resolve().parent.parent / "src")}
    proc = subprocess.Popen(
        [sys.executable, "-m", "aasrt", "serve", "--listen", f"127.0.0.1:{port}", "--store", str(tmp_path / "store"),
         "--tick-interval", "0.1", "--log-level", "warning", "--json"],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        env=env,
    )
    base = f"http://127.0.0.1:{port}"
    deadline = time.monotonic() + 20
    while time.monotonic() < deadline:
        try:
            if httpx.get(base + "/healthz", timeout=0.5).status_code == 200:
                break
        except httpx.HTTPError:
            time.sleep(0.1)
    else:
        proc.kill()
        pytest.fail("server did not start: " + proc.stderr.read().decode())
    yield proc, base, tmp_path / "store"
    if proc.poll() is None:
        proc.kill()
        proc.wait()


def test_serve_import_instances_and_sigterm(server, tmp_path, capsys):
    proc, base, store = server
    pkg = tmp_path / "p.aasx"
    pkg.write_bytes(package_bytes(data_submodel(), spec_submodel("svc", ["onInitialize"]), contexts=[context("svc")]))
    code, doc = run_json(capsys, "import", str(pkg), "--server", base)
    assert code == EXIT_OK and doc["result"]["activations"][0]["serviceId"] == "svc"
    code, doc = run_json(capsys, "import", str(pkg), "--server", base)
    assert code == EXIT_VALIDATION and doc["error"]["code"] == "DuplicateId"
    code, doc = run_json(capsys, "instances", "--server", base)
    assert [i["state"] for i in doc["result"]] == ["Running"]
    proc.send_signal(signal.SIGTERM)
    out, _ = proc.communicate(timeout=30)
    assert proc.returncode == 0
    final = json.loads(out.decode().strip().splitlines()[-1])
    jsonschema.validate(final, OUTPUT_SCHEMA)
    assert [t["reason"] for t in final["result"]["stopped"]] == ["OperatorStop"]
    # stored state survives; gc keeps the referenced context
    code, doc = run_json(capsys, "gc", "--store", str(store))
    assert code == EXIT_OK and doc["result"]["removed"] == [] and len(doc["result"]["kept"]) == 1


def test_gc_removes_unreferenced(tmp_path, capsys):
    from aasrt.runtime import Runtime

    runtime = Runtime(tmp_path)
    runtime.import_package(package_bytes(data_submodel(), spec_submodel("svc", ["onDemand"]), contexts=[context("svc")]))
    runtime.contexts.store(context("old", extra=b"x"))
    code, doc = run_json(capsys, "gc", "--store", str(tmp_path))
    assert [c["serviceId"] for c in doc["result"]["removed"]] == ["old"]
    assert run_json(capsys, "gc", "--store", str(tmp_path / "nope"))[0] == EXIT_CONFIG
