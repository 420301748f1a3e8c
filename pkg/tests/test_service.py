import random
import socket
import struct

import pytest
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from chiron.client import (
    AttestationFailure,
    HolderClient,
    LoopbackTransport,
    PolicyDenial,
    ProviderClient,
    RemoteError,
    SocketTransport,
)
from chiron.datasets import make_blobs
from chiron.enclave import CodeImage, measure
from chiron.sandbox import Activation, JobState, LayerSpec, ModelConfig, SgdOptimizer, encode_config
from chiron.service import Deployment, ServerThread
from chiron.taint import Label
from chiron.trainer import Dataset, ParameterVector
from chiron.wire import ErrorCode, Frame, FrameDecoder, MsgType, encode_frame
from oracles import mlp_predict

CONFIG = ModelConfig(21, (LayerSpec(2, 6, Activation.TANH), LayerSpec(6, 2)),
                     SgdOptimizer(0.1, 8, 5), 1)
CONFIG_BYTES = encode_config(CONFIG)
LAYERS = [(2, 6, "TANH"), (6, 2, "IDENTITY")]
EXPORT_KEY = bytes(range(32))


@pytest.fixture
def dep():
    d = Deployment(trainers=2, export_key=EXPORT_KEY)
    yield d
    d.enclave.join(10)
    d.shutdown()


def holder(dep, **kw):
    c = HolderClient(LoopbackTransport(dep.new_session()), dep.measurement,
                     dep.root_public_key, **kw)
    c.attest()
    return c


def provider(dep):
    c = ProviderClient(LoopbackTransport(dep.new_session()), dep.measurement,
                       dep.root_public_key)
    c.attest()
    return c


def trained(dep, data=None):
    provider(dep).provision(CONFIG_BYTES)
    h = holder(dep)
    h.upload(data or make_blobs(40, seed=1))
    h.start_train()
    assert h.wait(30).state is JobState.DONE
    return h


def error_code(frame):
    assert frame.msg_type == MsgType.ERROR
    return ErrorCode(frame.payload[0])


def test_unknown_type_keeps_connection(dep):
    s = dep.new_session()
    [reply] = s.handle(Frame(0x42, b""))
    assert error_code(reply) is ErrorCode.UNKNOWN_TYPE
    assert not s.closed
    [reply] = s.handle(Frame(MsgType.QUERY_RESP, b""))
    assert error_code(reply) is ErrorCode.UNKNOWN_TYPE


def test_message_before_attest_closes(dep):
    s = dep.new_session()
    [reply] = s.handle(Frame(MsgType.STATUS, b""))
    assert error_code(reply) is ErrorCode.PROTOCOL_VIOLATION
    assert s.closed and s.handle(Frame(MsgType.STATUS, b"")) == []


def test_unknown_role(dep):
    [reply] = dep.new_session().handle(Frame(MsgType.ATTEST_REQ, b"\x09" + bytes(64)))
    assert error_code(reply) is ErrorCode.MALFORMED


def test_provider_cannot_upload(dep):
    p = provider(dep)
    with pytest.raises(RemoteError) as err:
        p.request(MsgType.UPLOAD_DATA, b"", MsgType.STATUS)
    assert err.value.code is ErrorCode.ROLE_VIOLATION


def test_holder_cannot_provision(dep):
    h = holder(dep)
    with pytest.raises(RemoteError) as err:
        h.request(MsgType.PROVISION, CONFIG_BYTES, MsgType.STATUS)
    assert err.value.code is ErrorCode.ROLE_VIOLATION


def test_provider_status_before_provision(dep):
    with pytest.raises(RemoteError) as err:
        provider(dep).status()
    assert err.value.code is ErrorCode.PROTOCOL_VIOLATION


def test_provision_and_reprovision(dep):
    assert provider(dep).provision(CONFIG_BYTES) == (JobState.IDLE, 0)
    assert provider(dep).provision(CONFIG_BYTES) == (JobState.IDLE, 0)
    other = encode_config(CONFIG.with_seed(99))
    with pytest.raises(RemoteError) as err:
        provider(dep).provision(other)
    assert err.value.code is ErrorCode.ALREADY_PROVISIONED


def test_bad_config_rejected(dep):
    with pytest.raises(PolicyDenial) as err:
        provider(dep).provision(b'{"schema_version": 2}')
    assert err.value.code is ErrorCode.CONFIG_REJECTED


def test_train_before_provision(dep):
    h = holder(dep)
    h.upload(make_blobs(10))
    with pytest.raises(RemoteError) as err:
        h.start_train()
    assert err.value.code is ErrorCode.NOT_PROVISIONED


def test_query_before_done(dep):
    provider(dep).provision(CONFIG_BYTES)
    h = holder(dep)
    h.upload(make_blobs(10))
    with pytest.raises(RemoteError) as err:
        h.query([[0.0, 0.0]])
    assert err.value.code is ErrorCode.PROTOCOL_VIOLATION


def test_upload_after_train(dep):
    h = trained(dep)
    with pytest.raises(RemoteError) as err:
        h.upload(make_blobs(4))
    assert err.value.code is ErrorCode.PROTOCOL_VIOLATION


def test_wrong_input_dim_rejected(dep):
    provider(dep).provision(CONFIG_BYTES)
    h = holder(dep)
    with pytest.raises(RemoteError) as err:
        h.upload(Dataset([[1.0, 2.0, 3.0]], [0]))
    assert err.value.code is ErrorCode.INVALID_DATA


def test_ticket_isolation(dep):
    provider(dep).provision(CONFIG_BYTES)
    a = holder(dep)
    a.upload(make_blobs(10, seed=1))
    b = holder(dep)
    b.upload(make_blobs(10, seed=2))
    assert a.ticket != b.ticket
    # b's session is bound to job B, so presenting A's ticket is refused
    b.ticket = a.ticket
    with pytest.raises(RemoteError) as err:
        b.status()
    assert err.value.code is ErrorCode.AUTH_FAILURE
    forged = holder(dep, ticket=a.ticket[:16] + bytes(32))
    with pytest.raises(RemoteError) as err:
        forged.status()
    assert err.value.code is ErrorCode.AUTH_FAILURE


def test_ticket_resumes_job_in_new_session(dep):
    h = trained(dep)
    again = holder(dep, ticket=h.ticket)
    assert again.status().state is JobState.DONE
    assert again.query([[1.0, 1.0]]) == h.query([[1.0, 1.0]])


def test_failed_job_serves_no_query():
    dep = Deployment(trainers=2, trainer_image=CodeImage(b"rogue trainer"))
    provider(dep).provision(CONFIG_BYTES)
    h = holder(dep)
    h.upload(make_blobs(20))
    h.start_train()
    assert h.wait(10).state is JobState.FAILED
    with pytest.raises(RemoteError) as err:
        h.query([[0.0, 0.0]])
    assert err.value.code is ErrorCode.JOB_NOT_DONE
    dep.shutdown()


def test_predictions_match_oracle(dep):
    h = trained(dep)
    sealed = dep.enclave.ecall_export_params(h.ticket[:16])
    raw = ChaCha20Poly1305(EXPORT_KEY).decrypt(h.ticket[:12], sealed, b"chiron/export")
    params = ParameterVector.from_bytes(raw).values
    r = random.Random(5)
    rows = [[r.uniform(-3, 3), r.uniform(-3, 3)] for _ in range(50)]
    assert h.query(rows) == mlp_predict(params, LAYERS, rows)


def test_host_is_blind(dep):
    data = make_blobs(40, seed=1)
    canary = data.features[0][0]
    sessions = []
    orig = dep.new_session

    def tracking():
        s = orig()
        sessions.append(s)
        return s

    dep.new_session = tracking
    h = trained(dep, data)
    h.query([[0.5, 0.5]])
    observed = b"".join(p for s in sessions for p in s.observed)
    assert CONFIG_BYTES not in observed
    assert struct.pack(">d", canary) not in observed
    for c in dep.platform.boundary.snapshot():
        if c.direction == "OUT" and c.delivered:
            assert c.label is Label.PUBLIC


def test_wrong_measurement_fails_attestation(dep):
    c = HolderClient(LoopbackTransport(dep.new_session()), measure(CodeImage(b"x")),
                     dep.root_public_key)
    with pytest.raises(AttestationFailure) as err:
        c.attest()
    assert err.value.reason == "MEASUREMENT_MISMATCH"


def test_tcp_happy_path(dep):
    with ServerThread(dep) as server:
        addr = server.address
        p = ProviderClient(SocketTransport(addr), dep.measurement, dep.root_public_key)
        p.attest()
        p.provision(CONFIG_BYTES)
        p.close()
        h = HolderClient(SocketTransport(addr), dep.measurement, dep.root_public_key)
        h.attest()
        h.upload(make_blobs(40, seed=1))
        h.start_train()
        assert h.wait(30).state is JobState.DONE
        assert len(h.query([[0.0, 0.0], [1.0, 1.0]])) == 2
        h.close()


def test_tcp_oversize_frame(dep):
    with ServerThread(dep) as server:
        with socket.create_connection(server.address, timeout=5) as sock:
            sock.sendall((2**31).to_bytes(4, "big"))
            data = sock.recv(64)
        frames = FrameDecoder().feed(data)
        assert frames and ErrorCode(frames[0].payload[0]) is ErrorCode.OVERSIZE
        with socket.create_connection(server.address, timeout=5) as sock:
            sock.sendall(encode_frame(0x42, b""))
            frames = FrameDecoder().feed(sock.recv(64))
        assert ErrorCode(frames[0].payload[0]) is ErrorCode.UNKNOWN_TYPE
