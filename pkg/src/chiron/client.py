"""Data-holder and provider clients.

Clients talk through a transport with a single ``exchange(frame) -> frame``
method: :class:`SocketTransport` for TCP, :class:`LoopbackTransport` to drive
a :class:`~chiron.service.HostSession` in-process.
"""

from __future__ import annotations

import os
import socket
import time
from typing import Callable, Protocol, Sequence

from .channel import HandshakeError, Role, SecureChannel, finish, initiate
from .enclave import Measurement
from .sandbox import JobState, decode_status
from .taint import Label, TaintedBytes
from .trainer import Dataset
from .wire import (
    NO_TICKET,
    ErrorCode,
    Frame,
    FrameDecoder,
    HolderStatus,
    MsgType,
    SessionRole,
    decode_predictions,
    encode_frame,
    encode_query,
    encode_upload,
    parse_error,
)

UPLOAD_CHUNK_BYTES = 4 * 1024 * 1024


class ClientError(Exception):
    exit_code = 1


class ProtocolFailure(ClientError):
    exit_code = 2


class RemoteError(ProtocolFailure):
    def __init__(self, code: ErrorCode | int) -> None:
        name = code.name if isinstance(code, ErrorCode) else f"0x{code:02x}"
        super().__init__(f"server replied ERROR({name})")
        self.code = code


class AttestationFailure(ClientError):
    exit_code = 3

    def __init__(self, reason: str) -> None:
        super().__init__(f"attestation failed: {reason}")
        self.reason = reason


class PolicyDenial(RemoteError):
    exit_code = 4


class ConnectionClosed(ProtocolFailure):
    pass


class Transport(Protocol):
    def exchange(self, frame: Frame) -> Frame: ...

    def close(self) -> None: ...


class SocketTransport:
    def __init__(self, address: str | tuple[str, int], timeout: float = 30.0) -> None:
        if isinstance(address, str):
            host, _, port = address.rpartition(":")
            address = (host or "127.0.0.1", int(port))
        self.sock = socket.create_connection(address, timeout=timeout)
        self._decoder = FrameDecoder()
        self._ready: list[Frame] = []

    def exchange(self, frame: Frame) -> Frame:
        self.sock.sendall(encode_frame(frame.msg_type, frame.payload))
        while not self._ready:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise ConnectionClosed("server closed the connection")
            self._ready.extend(self._decoder.feed(chunk))
        return self._ready.pop(0)

    def close(self) -> None:
        self.sock.close()


class LoopbackTransport:
    def __init__(self, session) -> None:
        self.session = session

    def exchange(self, frame: Frame) -> Frame:
        replies = self.session.handle(frame)
        if not replies:
            raise ConnectionClosed("session closed")
        return replies[0]

    def close(self) -> None:
        self.session.close()


def _raise_remote(payload: bytes) -> None:
    code = parse_error(payload)
    if code in (ErrorCode.POLICY_DENIED, ErrorCode.CONFIG_REJECTED):
        raise PolicyDenial(code)
    if code is ErrorCode.ATTESTATION_FAILURE:
        raise AttestationFailure(code.name)
    raise RemoteError(code)


class _Client:
    role: SessionRole
    label: Label

    def __init__(self, transport: Transport, expected: Measurement, root_public_key: bytes,
                 randbytes: Callable[[int], bytes] = os.urandom) -> None:
        self.transport = transport
        self.expected = expected
        self.root_public_key = root_public_key
        self._randbytes = randbytes
        self.channel: SecureChannel | None = None

    def attest(self) -> None:
        state, hello = initiate(self._randbytes(32), self._randbytes, self.label)
        reply = self.transport.exchange(Frame(MsgType.ATTEST_REQ, bytes([self.role]) + hello))
        if reply.msg_type == MsgType.ERROR:
            _raise_remote(reply.payload)
        if reply.msg_type != MsgType.ATTEST_RESP:
            raise ProtocolFailure(f"expected ATTEST_RESP, got 0x{reply.msg_type:02x}")
        try:
            keys = finish(state, reply.payload, self.expected, self.root_public_key)
        except HandshakeError as exc:
            raise AttestationFailure(exc.reason) from None
        self.channel = SecureChannel(keys, Role.INITIATOR)

    def request(self, msg_type: MsgType, plaintext: bytes, expect: MsgType) -> TaintedBytes:
        if self.channel is None:
            raise ProtocolFailure("not attested")
        record = self.channel.seal(TaintedBytes(plaintext, self.label), bytes([msg_type]))
        reply = self.transport.exchange(Frame(msg_type, record.to_bytes()))
        if reply.msg_type == MsgType.ERROR:
            _raise_remote(reply.payload)
        if reply.msg_type != expect:
            raise ProtocolFailure(f"expected {expect.name}, got 0x{reply.msg_type:02x}")
        return self.channel.open(reply.payload, bytes([reply.msg_type]))

    def close(self) -> None:
        self.transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class HolderClient(_Client):
    role = SessionRole.HOLDER
    label = Label.HOLDER_SECRET

    def __init__(self, *args, ticket: bytes = NO_TICKET, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.ticket = ticket

    def _status_request(self, msg_type: MsgType, body: bytes = b"") -> HolderStatus:
        plain = self.request(msg_type, self.ticket + body, MsgType.STATUS)
        status = HolderStatus.from_bytes(plain.data)
        if status.job_id != bytes(16):
            self.ticket = status.ticket
        return status

    def upload(self, dataset: Dataset) -> HolderStatus:
        row_bytes = 8 * max(dataset.input_dim, 1) + 4
        per_chunk = max(1, UPLOAD_CHUNK_BYTES // row_bytes)
        status = None
        for start in range(0, dataset.n_rows, per_chunk):
            body = encode_upload(dataset.features[start:start + per_chunk],
                                 dataset.labels[start:start + per_chunk])
            status = self._status_request(MsgType.UPLOAD_DATA, body)
        return status

    def start_train(self) -> HolderStatus:
        return self._status_request(MsgType.START_TRAIN)

    def status(self) -> HolderStatus:
        return self._status_request(MsgType.STATUS)

    def wait(self, timeout: float = 600.0, poll: float = 0.05) -> HolderStatus:
        deadline = time.monotonic() + timeout
        while True:
            status = self.status()
            if status.state in (JobState.DONE, JobState.FAILED):
                return status
            if time.monotonic() > deadline:
                raise ClientError(f"job still {status.state.name} after {timeout}s")
            time.sleep(poll)

    def query(self, features: Sequence[Sequence[float]]) -> list[int]:
        plain = self.request(MsgType.QUERY, self.ticket + encode_query(features),
                             MsgType.QUERY_RESP)
        return decode_predictions(plain.data)


class ProviderClient(_Client):
    role = SessionRole.PROVIDER
    label = Label.PROVIDER_SECRET

    def provision(self, config_bytes: bytes) -> tuple[JobState, int]:
        return decode_status(self.request(MsgType.PROVISION, config_bytes, MsgType.STATUS).data)

    def status(self, job_id: bytes | None = None) -> tuple[JobState, int]:
        return decode_status(self.request(MsgType.STATUS, job_id or b"", MsgType.STATUS).data)
