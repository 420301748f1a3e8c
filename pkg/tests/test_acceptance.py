"""Exit criteria, each at its stated tolerance and time budget.

The terminal summary prints one PASS/FAIL line per criterion (see conftest).
"""

import os
import random
import subprocess
import sys
import time
from pathlib import Path

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from chiron.audit import MUTATIONS, SCENARIOS, run_all
from chiron.channel import (
    ChannelError,
    HandshakeError,
    HandshakeState,
    Role,
    SecureChannel,
    finish,
    initiate,
    respond,
)
from chiron.cli import holder_main, provider_main
from chiron.coordinator import TrainerEnclave, TrainingJob, partition, rounds_for, run_job
from chiron.datasets import load_csv, make_blobs, save_csv
from chiron.enclave import (
    QUOTE_SIZE,
    CodeImage,
    Platform,
    Quote,
    QuoteVerdict,
    generate_quote,
    load_or_create_root_key,
    verify_quote,
)
from chiron.sandbox import Activation, LayerSpec, ModelConfig, SgdOptimizer, encode_config
from chiron.service import Deployment, ServerThread
from chiron.trainer import (
    Dataset,
    ParameterVector,
    accuracy,
    backward,
    forward,
    init_params,
    predict,
    run_epochs,
)
from oracles import mean_xent, mlp_predict

pytestmark = pytest.mark.acceptance

IMAGE = CodeImage(b"acceptance image")
EXPORT_KEY = bytes(range(32, 64))
E2E_CONFIG = ModelConfig(1234, (LayerSpec(2, 8, Activation.TANH), LayerSpec(8, 2)),
                         SgdOptimizer(0.05, 16, 20), 1)


def layer_tuples(config):
    return [(l.input_dim, l.output_dim, l.activation.value) for l in config.layers]


@pytest.fixture(scope="module")
def platform():
    p = Platform(Ed25519PrivateKey.from_private_bytes(bytes(range(1, 33))))
    yield p
    p.shutdown()


# -- 1 ------------------------------------------------------------------------

@pytest.mark.acceptance(1, "quote soundness and exhaustive single-byte tamper")
def test_attestation_tamper(platform):
    t0 = time.perf_counter()
    enclave = platform.create_enclave(IMAGE)
    rng = random.Random(1)
    for _ in range(200):
        q = generate_quote(enclave, rng.randbytes(64))
        assert verify_quote(q, enclave.measurement, platform.root_public_key) is QuoteVerdict.ACCEPT

    raw = generate_quote(enclave, rng.randbytes(64)).to_bytes()
    accepted = 0
    for pos in range(QUOTE_SIZE):
        for delta in range(1, 256):
            bad = bytearray(raw)
            bad[pos] ^= delta
            if verify_quote(Quote.from_bytes(bytes(bad)), enclave.measurement,
                            platform.root_public_key):
                accepted += 1
    assert accepted == 0
    assert time.perf_counter() - t0 < 10


# -- 2 ------------------------------------------------------------------------

def _client(seed=7):
    r = random.Random(seed)
    return initiate(r.randbytes(32), r.randbytes)


@pytest.mark.acceptance(2, "channel round-trip, replay/reorder, transcript fuzz")
def test_channel_properties(platform):
    t0 = time.perf_counter()
    enclave = platform.create_enclave(IMAGE)
    state, hello = _client()
    server = HandshakeState.responder()
    response = respond(server, hello, enclave, random.Random(8).randbytes)
    keys = finish(state, response, enclave.measurement, platform.root_public_key)
    c = SecureChannel(keys, Role.INITIATOR)
    s = SecureChannel(server.keys, Role.RESPONDER)

    rng = random.Random(2)
    for i in range(1000):
        pt = rng.randbytes(rng.randrange(0, 2048))
        aad = rng.randbytes(rng.randrange(0, 8))
        sender, receiver = (c, s) if i % 2 == 0 else (s, c)
        first, second = sender.seal(pt, aad), sender.seal(pt[::-1], aad)
        # reorder: the later record cannot be opened first
        with pytest.raises(ChannelError):
            receiver.open(second, aad)
        assert receiver.open(first, aad).data == pt
        # replay: an accepted record cannot be accepted again
        with pytest.raises(ChannelError):
            receiver.open(first, aad)
        assert receiver.open(second, aad).data == pt[::-1]

    transcript = hello + response
    slack = 0
    for pos in range(len(transcript)):
        for delta in range(1, 256):
            bad = bytearray(transcript)
            bad[pos] ^= delta
            st, _ = _client()
            try:
                if pos < len(hello):
                    resp = respond(HandshakeState.responder(), bytes(bad[:len(hello)]), enclave,
                                   random.Random(8).randbytes)
                else:
                    resp = bytes(bad[len(hello):])
                finish(st, resp, enclave.measurement, platform.root_public_key)
            except HandshakeError:
                continue
            slack += 1
    assert slack == 0
    assert time.perf_counter() - t0 < 30


# -- 3 ------------------------------------------------------------------------

def _random_mlp(r):
    n_layers = r.randint(1, 3)
    dims = [r.randint(1, 5) for _ in range(n_layers)] + [r.randint(2, 5)]
    acts = [r.choice(list(Activation)) for _ in range(n_layers - 1)] + [Activation.IDENTITY]
    layers = tuple(LayerSpec(dims[i], dims[i + 1], acts[i]) for i in range(n_layers))
    return ModelConfig(r.getrandbits(64), layers, SgdOptimizer(0.1, 4, 1))


@pytest.mark.acceptance(3, "gradient check on 50 random MLPs")
def test_gradient_check():
    t0 = time.perf_counter()
    h = 1e-5
    worst = 0.0
    for seed in range(50):
        r = random.Random(seed)
        config = _random_mlp(r)
        n = r.randint(1, 4)
        batch = Dataset([[r.gauss(0, 1) for _ in range(config.input_dim)] for _ in range(n)],
                        [r.randrange(config.n_classes) for _ in range(n)])
        p = [v + r.gauss(0, 0.1) for v in init_params(config).values]
        g = backward(p, config, batch, forward(p, config, batch)[1]).values
        layers = layer_tuples(config)
        for i in range(len(p)):
            q = list(p)
            q[i] += h
            up = mean_xent(q, layers, batch.features, batch.labels)
            q[i] -= 2 * h
            down = mean_xent(q, layers, batch.features, batch.labels)
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-6))
    assert worst < 1e-4, worst
    assert time.perf_counter() - t0 < 60


# -- 4 ------------------------------------------------------------------------

@pytest.mark.acceptance(4, "learning sanity on Gaussian blobs")
def test_learning_sanity():
    t0 = time.perf_counter()
    data = make_blobs(200, 0.3, 0)
    config = ModelConfig(0, (LayerSpec(2, 8, Activation.TANH), LayerSpec(8, 2)),
                         SgdOptimizer(0.05, 16, 50), 1)
    params = run_epochs(config, data, init_params(config))
    assert accuracy(params, config, data) >= 0.95
    assert time.perf_counter() - t0 < 10


# -- 5 ------------------------------------------------------------------------

def _cluster(k):
    p = Platform()
    agg = TrainerEnclave(p.create_enclave(IMAGE), p.root_public_key)
    return agg, [TrainerEnclave(p.create_enclave(IMAGE), p.root_public_key) for _ in range(k)]


@pytest.mark.acceptance(5, "distributed equivalences (k=1, identical shards k=2,4)")
def test_distributed_equivalence():
    t0 = time.perf_counter()
    config = ModelConfig(9, (LayerSpec(2, 8, Activation.TANH), LayerSpec(8, 2)),
                         SgdOptimizer(0.05, 8, 5), 1)
    data = make_blobs(64, 0.3, 3)

    agg, trainers = _cluster(1)
    job = TrainingJob(bytes(16), 1, config, partition(data, 1))
    standalone = run_epochs(config, data, init_params(config))
    assert run_job(job, agg, trainers).to_bytes() == standalone.to_bytes()

    for k in (2, 4):
        rows = [r for r in data.features for _ in range(k)]
        labels = [y for y in data.labels for _ in range(k)]
        agg, trainers = _cluster(k)
        job = TrainingJob(bytes(16), k, config, partition(Dataset(rows, labels), k),
                          record_rounds=True)
        run_job(job, agg, trainers)
        assert len(job.rounds) == rounds_for(config, job.shards)
        for rnd in job.rounds:
            assert all(c == rnd.contributions[0] for c in rnd.contributions)
            assert rnd.result == rnd.contributions[0]
    assert time.perf_counter() - t0 < 30


# -- 6 ------------------------------------------------------------------------

def _script(name):
    return [sys.executable, "-c",
            f"import sys; from chiron.cli import {name}; sys.exit({name}())"]


@pytest.mark.acceptance(6, "end-to-end CLI flow over loopback TCP")
def test_end_to_end_cli(tmp_path):
    t0 = time.perf_counter()
    env = {k: v for k, v in os.environ.items() if k != "CHIRON_SEED"}
    env["CHIRON_ROOT_PUBKEY"] = str(tmp_path / "root.key.pub")
    (tmp_path / "model.json").write_bytes(encode_config(E2E_CONFIG))
    save_csv(make_blobs(120, 0.3, 5), tmp_path / "train.csv")
    r = random.Random(6)
    queries = [[r.uniform(-2.5, 2.5), r.uniform(-2.5, 2.5)] for _ in range(40)]
    (tmp_path / "q.csv").write_text("".join(f"{a!r},{b!r}\n" for a, b in queries))

    server = subprocess.Popen(
        _script("server_main") + ["--listen", "127.0.0.1:0", "--root-key",
                                  str(tmp_path / "root.key")],
        stdout=subprocess.PIPE, text=True, env=env)
    try:
        measurement = server.stdout.readline().split()[1]
        address = server.stdout.readline().split()[1]

        def run(name, *args):
            return subprocess.run(_script(name) + ["--server", address, *args], env=env,
                                  capture_output=True, text=True, timeout=60)

        out = run("provider_main", "--config", str(tmp_path / "model.json"))
        assert out.returncode == 0, out.stderr
        holder = ["--expected-measurement", measurement, "--data", str(tmp_path / "train.csv")]
        for cmd in (["upload"], ["--wait", "train"]):
            out = run("holder_main", *holder, *cmd)
            assert out.returncode == 0, out.stderr
        assert out.stdout.strip() == "DONE epoch=20"
        out = run("holder_main", *holder, "--query", str(tmp_path / "q.csv"), "query")
        assert out.returncode == 0, out.stderr
        served = [int(line) for line in out.stdout.split()]
    finally:
        server.terminate()
        server.wait(10)

    data = load_csv(tmp_path / "train.csv")
    params = run_epochs(E2E_CONFIG, data, init_params(E2E_CONFIG))
    assert served == mlp_predict(params.values, layer_tuples(E2E_CONFIG), queries)
    assert served == predict(params, E2E_CONFIG, queries)
    assert time.perf_counter() - t0 < 60


# -- 7 ------------------------------------------------------------------------

@pytest.mark.acceptance(7, "threat suite: all scenarios HELD, all mutations detected")
def test_threat_suite():
    t0 = time.perf_counter()
    report = run_all(mutations=True)
    assert report["total"] == len(SCENARIOS) >= 12
    assert report["held"] == report["total"], [
        s for s in report["scenarios"] if s["verdict"] != "HELD"]
    assert {m["name"] for m in report["mutations"]} == set(MUTATIONS)
    assert all(m["detected_by"] for m in report["mutations"]), report["mutations"]
    assert report["ok"]
    assert time.perf_counter() - t0 < 120


# -- 8 ------------------------------------------------------------------------

def _e2e_params(tmp: Path, seed: str, monkeypatch) -> bytes:
    tmp.mkdir()
    key_path = tmp / "root.key"
    dep = Deployment(Platform(load_or_create_root_key(key_path)), trainers=2,
                     export_key=EXPORT_KEY)
    monkeypatch.setenv("CHIRON_ROOT_PUBKEY", str(key_path) + ".pub")
    monkeypatch.setenv("CHIRON_SEED", seed)
    (tmp / "model.json").write_bytes(encode_config(E2E_CONFIG))
    save_csv(make_blobs(60, 0.3, 8), tmp / "train.csv")
    try:
        with ServerThread(dep) as server:
            address = "%s:%d" % server.address
            assert provider_main(["--server", address, "--config", str(tmp / "model.json")]) == 0
            holder = ["--server", address, "--expected-measurement", dep.measurement.hex(),
                      "--data", str(tmp / "train.csv")]
            assert holder_main(holder + ["upload"]) == 0
            assert holder_main(holder + ["--wait", "train"]) == 0
        job_id = bytes.fromhex((tmp / "train.csv.job").read_text().strip())[:16]
        sealed = dep.enclave.ecall_export_params(job_id)
    finally:
        dep.enclave.join(10)
        dep.shutdown()
    raw = ChaCha20Poly1305(EXPORT_KEY).decrypt(job_id[:12], sealed, b"chiron/export")
    assert ParameterVector.from_bytes(raw).is_finite()
    return raw


@pytest.mark.acceptance(8, "determinism of two seeded end-to-end runs")
def test_determinism(tmp_path, monkeypatch):
    first = _e2e_params(tmp_path / "a", "4242", monkeypatch)
    second = _e2e_params(tmp_path / "b", "4242", monkeypatch)
    other = _e2e_params(tmp_path / "c", "4243", monkeypatch)
    assert first == second
    assert first != other
