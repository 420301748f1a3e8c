import json
import subprocess
import sys

import pytest

from chiron.cli import audit_main, holder_main, provider_main, server_main
from chiron.datasets import make_blobs, save_csv
from chiron.enclave import Platform, load_or_create_root_key, measure
from chiron.runtime import runtime_image
from chiron.sandbox import Activation, LayerSpec, ModelConfig, SgdOptimizer, encode_config
from chiron.service import Deployment, ServerThread

CONFIG = ModelConfig(4, (LayerSpec(2, 4, Activation.TANH), LayerSpec(4, 2)),
                     SgdOptimizer(0.1, 8, 4), 1)


@pytest.fixture
def env(tmp_path, monkeypatch):
    key_path = tmp_path / "root.key"
    dep = Deployment(Platform(load_or_create_root_key(key_path)), trainers=2)
    monkeypatch.setenv("CHIRON_ROOT_PUBKEY", str(key_path) + ".pub")
    monkeypatch.delenv("CHIRON_SEED", raising=False)
    (tmp_path / "model.json").write_bytes(encode_config(CONFIG))
    save_csv(make_blobs(40, seed=6), tmp_path / "data.csv")
    with ServerThread(dep) as server:
        host, port = server.address
        yield tmp_path, f"{host}:{port}", dep.measurement.hex()
    dep.enclave.join(10)
    dep.shutdown()


def provider(env, *extra):
    tmp, addr, _ = env
    return provider_main(["--server", addr, "--config", str(tmp / "model.json"), *extra])


def holder(env, command, *extra, measurement=None):
    tmp, addr, m = env
    return holder_main(["--server", addr, "--expected-measurement", measurement or m,
                        "--data", str(tmp / "data.csv"), *extra, command])


def test_full_flow(env, capsys):
    tmp = env[0]
    assert provider(env) == 0
    assert capsys.readouterr().out.strip() == "IDLE epoch=0"
    assert holder(env, "upload") == 0
    ticket = tmp / "data.csv.job"
    assert len(bytes.fromhex(ticket.read_text().strip())) == 48
    assert ticket.stat().st_mode & 0o777 == 0o600
    assert holder(env, "train", "--wait") == 0
    assert capsys.readouterr().out.splitlines()[-1] == "DONE epoch=4"
    assert holder(env, "status") == 0
    (tmp / "q.csv").write_text("1.0,1.0\n-1.0,-1.0\n")
    capsys.readouterr()
    assert holder(env, "query", "--query", str(tmp / "q.csv")) == 0
    assert capsys.readouterr().out.split() == ["1", "0"]
    assert provider(env, "--status") == 0
    assert capsys.readouterr().out.strip() == "DONE epoch=4"


def test_query_without_ticket_is_usage_error(env):
    assert holder(env, "query") == 1


def test_query_before_train_is_protocol_error(env):
    assert provider(env) == 0
    assert holder(env, "upload") == 0
    assert holder(env, "query") == 2


def test_wrong_measurement_exit_3(env):
    assert holder(env, "upload", measurement="00" * 32) == 3
    assert provider(env, "--expected-measurement", "11" * 32) == 3


def test_bad_config_exit_4(env):
    (env[0] / "model.json").write_text(json.dumps({"schema_version": 9}))
    assert provider(env) == 4


def test_missing_root_pubkey(env, monkeypatch):
    monkeypatch.delenv("CHIRON_ROOT_PUBKEY")
    assert provider(env) == 1


def test_unreachable_server(tmp_path, monkeypatch):
    key_path = tmp_path / "root.key"
    load_or_create_root_key(key_path)
    monkeypatch.setenv("CHIRON_ROOT_PUBKEY", str(key_path) + ".pub")
    (tmp_path / "model.json").write_bytes(encode_config(CONFIG))
    assert provider_main(["--server", "127.0.0.1:1", "--config",
                          str(tmp_path / "model.json")]) == 2


def test_seed_override(env, monkeypatch, capsys):
    monkeypatch.setenv("CHIRON_SEED", "77")
    assert provider(env) == 0
    monkeypatch.setenv("CHIRON_SEED", "78")
    # a different seed is a different configuration
    assert provider(env) == 2


def test_print_measurement(capsys):
    assert server_main(["--root-key", "unused", "--print-measurement"]) == 0
    assert capsys.readouterr().out.strip() == measure(runtime_image()).hex()


def test_audit_no_mutations(capsys):
    assert audit_main(["run-all", "--no-mutations", "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["ok"] and report["held"] == report["total"]


def test_installed_script_runs():
    out = subprocess.run([sys.executable, "-c",
                          "from chiron.cli import server_main; raise SystemExit("
                          "server_main(['--root-key', 'x', '--print-measurement']))"],
                         capture_output=True, text=True, timeout=60)
    assert out.returncode == 0
    assert out.stdout.strip() == measure(runtime_image()).hex()
