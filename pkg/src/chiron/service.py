"""The untrusted host: TCP listener, framing, routing into the serving enclave.

:class:`HostSession` is the per-connection state machine with no I/O of its
own, so the same code runs under the asyncio server and in-process test
harnesses.  The host never holds session keys; it relays sealed records
verbatim and only ever sees PUBLIC bytes.
"""

from __future__ import annotations

import asyncio
import enum
import itertools
import logging
import os
import threading
from typing import Callable

from .coordinator import TrainerEnclave
from .enclave import CodeImage, EnclaveHandle, Measurement, Platform
from .runtime import RequestRejected, ServiceEnclave, runtime_image
from .wire import (
    ErrorCode,
    Frame,
    FrameDecoder,
    FrameError,
    MsgType,
    SessionRole,
    encode_frame,
    error_payload,
)

log = logging.getLogger("chiron.service")

FATAL = {
    ErrorCode.PROTOCOL_VIOLATION,
    ErrorCode.ROLE_VIOLATION,
    ErrorCode.ATTESTATION_FAILURE,
    ErrorCode.AUTH_FAILED,
    ErrorCode.REPLAY,
    ErrorCode.MALFORMED,
    ErrorCode.OVERSIZE,
    ErrorCode.LENGTH_ZERO,
}

_ALLOWED = {
    SessionRole.HOLDER: {MsgType.UPLOAD_DATA, MsgType.START_TRAIN, MsgType.STATUS, MsgType.QUERY},
    SessionRole.PROVIDER: {MsgType.PROVISION, MsgType.STATUS},
}
_CLIENT_TYPES = {MsgType.ATTEST_REQ, MsgType.PROVISION, MsgType.UPLOAD_DATA,
                 MsgType.START_TRAIN, MsgType.STATUS, MsgType.QUERY}


class Deployment:
    """One platform with a serving enclave and a trainer-enclave factory."""

    def __init__(self, platform: Platform | None = None, trainers: int = 1,
                 image: CodeImage | None = None,
                 program: type[ServiceEnclave] = ServiceEnclave,
                 trainer_image: CodeImage | None = None,
                 trainer_program: type[TrainerEnclave] = TrainerEnclave,
                 export_key: bytes | None = None,
                 randbytes: Callable[[int], bytes] = os.urandom) -> None:
        self.platform = platform or Platform()
        self.image = image or runtime_image()
        self.trainer_image = trainer_image or self.image
        self.trainer_program = trainer_program
        self._randbytes = randbytes
        handle = self.platform.create_enclave(self.image)
        self.enclave: ServiceEnclave = program(
            handle, self.platform.root_public_key, spawn_trainer=self.spawn_trainer,
            trainers=trainers, randbytes=randbytes, export_key=export_key)
        self.trainer_handles: list[EnclaveHandle] = []
        self._session_ids = itertools.count(1)

    @property
    def measurement(self) -> Measurement:
        return self.enclave.measurement

    @property
    def root_public_key(self) -> bytes:
        return self.platform.root_public_key

    def spawn_trainer(self) -> TrainerEnclave:
        handle = self.platform.create_enclave(self.trainer_image)
        self.trainer_handles.append(handle)
        return self.trainer_program(handle, self.platform.root_public_key, self._randbytes)

    def new_session(self) -> "HostSession":
        return HostSession(self, next(self._session_ids))

    def shutdown(self) -> None:
        self.platform.shutdown()


class SessionPhase(enum.Enum):
    NEW = "NEW"
    ATTESTED = "ATTESTED"
    PROVISIONED = "PROVISIONED"
    CLOSED = "CLOSED"


class HostSession:
    """Protocol state machine for one connection.

    HOLDER:   ATTEST_REQ -> {UPLOAD_DATA, START_TRAIN, STATUS, QUERY}*
    PROVIDER: ATTEST_REQ -> PROVISION -> STATUS*

    Job-level ordering (no upload after training starts, no query before it
    finishes) is enforced inside the enclave, which alone can read the job.
    """

    def __init__(self, deployment: Deployment, session_id: int) -> None:
        self.deployment = deployment
        self.session_id = session_id
        self.role: SessionRole | None = None
        self.phase = SessionPhase.NEW
        self.observed: list[bytes] = []

    @property
    def closed(self) -> bool:
        return self.phase is SessionPhase.CLOSED

    def _error(self, code: ErrorCode) -> Frame:
        if code in FATAL:
            self.close()
        return Frame(MsgType.ERROR, error_payload(code))

    def close(self) -> None:
        if self.phase is not SessionPhase.CLOSED:
            self.phase = SessionPhase.CLOSED
            self.deployment.enclave.ecall_close(self.session_id)

    def handle(self, frame: Frame) -> list[Frame]:
        if self.closed:
            return []
        self.observed.append(frame.payload)
        try:
            msg_type = MsgType(frame.msg_type)
        except ValueError:
            return [self._error(ErrorCode.UNKNOWN_TYPE)]
        if msg_type not in _CLIENT_TYPES:
            return [self._error(ErrorCode.UNKNOWN_TYPE)]
        try:
            reply = self._dispatch(msg_type, frame.payload)
        except RequestRejected as rejected:
            log.info("session %d: %s", self.session_id, rejected.code.name)
            return [self._error(rejected.code)]
        except Exception:  # noqa: BLE001 - never let a bad request kill the host
            log.exception("session %d: internal error", self.session_id)
            return [self._error(ErrorCode.INTERNAL)]
        self.observed.append(reply.payload)
        return [reply]

    def _dispatch(self, msg_type: MsgType, payload: bytes) -> Frame:
        enclave = self.deployment.enclave
        if msg_type is MsgType.ATTEST_REQ:
            if self.phase is not SessionPhase.NEW:
                raise RequestRejected(ErrorCode.PROTOCOL_VIOLATION, "second ATTEST_REQ")
            if len(payload) < 1:
                raise RequestRejected(ErrorCode.MALFORMED, "missing role")
            try:
                role = SessionRole(payload[0])
            except ValueError:
                raise RequestRejected(ErrorCode.MALFORMED, "unknown role") from None
            response = enclave.ecall_attest(self.session_id, role, payload[1:])
            self.role = role
            self.phase = SessionPhase.ATTESTED
            return Frame(MsgType.ATTEST_RESP, response)

        if self.phase is SessionPhase.NEW:
            raise RequestRejected(ErrorCode.PROTOCOL_VIOLATION, "message before ATTEST_REQ")
        if msg_type not in _ALLOWED[self.role]:
            raise RequestRejected(ErrorCode.ROLE_VIOLATION, f"{self.role.name} sent {msg_type.name}")
        if self.role is SessionRole.PROVIDER:
            if msg_type is MsgType.STATUS and self.phase is not SessionPhase.PROVISIONED:
                raise RequestRejected(ErrorCode.PROTOCOL_VIOLATION, "STATUS before PROVISION")
            if msg_type is MsgType.PROVISION and self.phase is SessionPhase.PROVISIONED:
                raise RequestRejected(ErrorCode.PROTOCOL_VIOLATION, "second PROVISION")
        reply_type, reply = enclave.ecall_message(self.session_id, msg_type, payload)
        if msg_type is MsgType.PROVISION:
            self.phase = SessionPhase.PROVISIONED
        return Frame(reply_type, reply)


class ChironServer:
    """asyncio TCP front end; one :class:`HostSession` per connection."""

    def __init__(self, deployment: Deployment, host: str = "127.0.0.1", port: int = 0) -> None:
        self.deployment = deployment
        self.host = host
        self.port = port
        self._server: asyncio.base_events.Server | None = None

    async def start(self) -> tuple[str, int]:
        self._server = await asyncio.start_server(self.handle_session, self.host, self.port)
        sock = self._server.sockets[0]
        self.host, self.port = sock.getsockname()[:2]
        log.info("listening on %s:%d, measurement %s", self.host, self.port,
                 self.deployment.measurement.hex())
        return self.host, self.port

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        async with self._server:
            await self._server.serve_forever()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    async def handle_session(self, reader: asyncio.StreamReader,
                             writer: asyncio.StreamWriter) -> None:
        session = self.deployment.new_session()
        decoder = FrameDecoder()
        loop = asyncio.get_running_loop()
        try:
            while not session.closed:
                chunk = await reader.read(65536)
                if not chunk:
                    break
                try:
                    frames = decoder.feed(chunk)
                except FrameError as exc:
                    writer.write(encode_frame(MsgType.ERROR, error_payload(ErrorCode[exc.reason])))
                    break
                for frame in frames:
                    # enclave calls may do real work (queries); keep the loop responsive
                    replies = await loop.run_in_executor(None, session.handle, frame)
                    for reply in replies:
                        writer.write(encode_frame(reply.msg_type, reply.payload))
                    await writer.drain()
                    if session.closed:
                        break
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            session.close()
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass


class ServerThread:
    """Run a :class:`ChironServer` on a background event loop (tests, demos)."""

    def __init__(self, deployment: Deployment, host: str = "127.0.0.1", port: int = 0) -> None:
        self.server = ChironServer(deployment, host, port)
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, daemon=True,
                                        name="chiron-server")
        self.address: tuple[str, int] | None = None

    def start(self) -> tuple[str, int]:
        self._thread.start()
        future = asyncio.run_coroutine_threadsafe(self.server.start(), self._loop)
        self.address = future.result(timeout=10)
        return self.address

    def stop(self) -> None:
        asyncio.run_coroutine_threadsafe(self.server.close(), self._loop).result(timeout=10)
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join(timeout=10)

    def __enter__(self) -> "ServerThread":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()
