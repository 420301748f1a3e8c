"""The trusted platform program loaded into the serving enclave.

It terminates every attested session (holder or provider), keeps the
provisioned :class:`~chiron.sandbox.ModelConfig`, holder datasets and trained
models in enclave memory, and coordinates training across trainer enclaves.
The host only ever passes opaque bytes in and gets PUBLIC bytes back.

Holder request plaintexts are ``ticket (48) || body`` where the ticket is
``job_id (16) || job_secret (32)``; an all-zero ticket means "the job bound
to this session" and creates one on first upload.
"""

from __future__ import annotations

import hmac
import json
import os
import threading
from dataclasses import dataclass, field
from typing import Callable

from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .boundary import EnclaveProgram, PolicyDenied
from .channel import ChannelError, HandshakeError, HandshakeState, Role, SecureChannel, respond
from .coordinator import JobFailed, TrainingJob, TrainerEnclave, partition, run_job
from .enclave import CodeImage, EnclaveState
from .sandbox import (
    POLICY_DESCRIPTION,
    ConfigRejected,
    IoChannel,
    JobState,
    ModelConfig,
    encode_status,
    validate_config,
)
from .taint import Label, TaintedBytes, public
from .trainer import Dataset, ParameterVector, TrainingError, predict
from .wire import (
    JOB_ID_SIZE,
    NO_TICKET,
    ErrorCode,
    HolderStatus,
    MsgType,
    PayloadError,
    SessionRole,
    decode_query,
    decode_upload,
    encode_predictions,
    split_ticket,
)

RUNTIME_VERSION = "chiron-runtime/0.1.0"
MAX_QUERY_ROWS = 100_000


def runtime_image(version: str = RUNTIME_VERSION) -> CodeImage:
    """Canonical code image: runtime version plus sandbox policy, as compact JSON."""
    doc = {"runtime": version, "policy": POLICY_DESCRIPTION}
    return CodeImage(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode())


class RequestRejected(Exception):
    """A request the enclave refuses; ``code`` is public protocol vocabulary."""

    def __init__(self, code: ErrorCode, detail: str = "") -> None:
        super().__init__(f"{code.name}: {detail}" if detail else code.name)
        self.code = code


@dataclass
class _Session:
    role: SessionRole
    channel: SecureChannel
    job_id: bytes | None = None


@dataclass
class _Job:
    job_id: bytes
    secret: bytes
    features: list[list[float]] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    state: JobState = JobState.IDLE
    epoch: int = 0
    training: TrainingJob | None = None
    params: ParameterVector | None = None
    config: ModelConfig | None = None

    def current_state(self) -> tuple[JobState, int]:
        if self.training is not None and self.state not in (JobState.DONE, JobState.FAILED):
            return self.training.state, self.training.epoch
        return self.state, self.epoch


def _aad(msg_type: MsgType) -> bytes:
    return bytes([msg_type])


class ServiceEnclave(EnclaveProgram):
    """Serving enclave: sessions, jobs, aggregation and inference."""

    def __init__(self, handle, root_public_key: bytes,
                 spawn_trainer: Callable[[], TrainerEnclave] | None = None,
                 trainers: int = 1,
                 randbytes: Callable[[int], bytes] = os.urandom,
                 export_key: bytes | None = None) -> None:
        super().__init__(handle, root_public_key)
        if not 1 <= trainers <= 16:
            raise ValueError("trainers must be in [1, 16]")
        self._spawn_trainer = spawn_trainer
        self._k = trainers
        self._randbytes = randbytes
        self._export_key = export_key
        self._sessions: dict[int, _Session] = {}
        self._jobs: dict[bytes, _Job] = {}
        self._latest_job: bytes | None = None
        self._config: ModelConfig | None = None
        self._config_bytes: bytes | None = None
        self._lock = threading.RLock()
        self._threads: list[threading.Thread] = []

    # -- entry points -------------------------------------------------------

    def ecall_attest(self, session_id: int, role: SessionRole, hello: bytes) -> bytes:
        hello = self._ingress("ATTEST_REQ", hello)
        label = Label.HOLDER_SECRET if role is SessionRole.HOLDER else Label.PROVIDER_SECRET
        state = HandshakeState.responder(label)
        try:
            response = respond(state, hello, self.handle, self._randbytes)
        except HandshakeError as exc:
            raise RequestRejected(ErrorCode.MALFORMED, exc.reason) from None
        with self._lock:
            self._sessions[session_id] = _Session(role, SecureChannel(state.keys, Role.RESPONDER))
        channel = (IoChannel.TO_HOLDER_CHANNEL if role is SessionRole.HOLDER
                   else IoChannel.TO_PROVIDER)
        return self._egress(channel, public(response))

    def ecall_message(self, session_id: int, msg_type: MsgType, payload: bytes
                      ) -> tuple[MsgType, bytes]:
        payload = self._ingress(msg_type.name, payload)
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise RequestRejected(ErrorCode.PROTOCOL_VIOLATION, "no attested session")
        try:
            plain = session.channel.open(payload, _aad(msg_type))
        except ChannelError as exc:
            raise RequestRejected(ErrorCode[exc.reason], str(exc)) from None
        if session.role is SessionRole.HOLDER:
            handler = self._HOLDER.get(msg_type)
        else:
            handler = self._PROVIDER.get(msg_type)
        if handler is None:
            raise RequestRejected(ErrorCode.ROLE_VIOLATION, msg_type.name)
        try:
            return handler(self, session, plain)
        except PolicyDenied as denied:
            raise RequestRejected(ErrorCode.POLICY_DENIED, str(denied)) from None

    def ecall_close(self, session_id: int) -> None:
        with self._lock:
            self._sessions.pop(session_id, None)

    def ecall_export_params(self, job_id: bytes) -> bytes:
        """Test-build hook: the trained model sealed under the export key."""
        if self._export_key is None:
            raise RequestRejected(ErrorCode.ROLE_VIOLATION, "export disabled")
        job = self._jobs.get(bytes(job_id))
        if job is None or job.params is None:
            raise RequestRejected(ErrorCode.JOB_NOT_DONE)
        sealed = ChaCha20Poly1305(self._export_key).encrypt(
            job.job_id[:12], job.params.to_bytes(), b"chiron/export")
        self.platform.log_crossing(self.handle, "OUT", "TEST_EXPORT", Label.PUBLIC, sealed)
        return sealed

    def join(self, timeout: float | None = None) -> None:
        """Wait for background training threads (tests and shutdown)."""
        for t in list(self._threads):
            t.join(timeout)

    # -- helpers ------------------------------------------------------------

    def _reply(self, session: _Session, msg_type: MsgType, plaintext: TaintedBytes
               ) -> tuple[MsgType, bytes]:
        channel = (IoChannel.TO_HOLDER_CHANNEL if session.role is SessionRole.HOLDER
                   else IoChannel.TO_PROVIDER)
        return msg_type, self._send_sealed(channel, session.channel, plaintext, _aad(msg_type))

    def _resolve_job(self, session: _Session, ticket: bytes, create: bool = False) -> _Job:
        with self._lock:
            if ticket == NO_TICKET:
                if session.job_id is not None:
                    return self._jobs[session.job_id]
                if not create:
                    raise RequestRejected(ErrorCode.PROTOCOL_VIOLATION, "no job for session")
                job = _Job(self._randbytes(JOB_ID_SIZE), self._randbytes(32))
                self._jobs[job.job_id] = job
                self._latest_job = job.job_id
                session.job_id = job.job_id
                return job
            job_id, secret = ticket[:JOB_ID_SIZE], ticket[JOB_ID_SIZE:]
            job = self._jobs.get(job_id)
            if job is None or not hmac.compare_digest(job.secret, secret):
                raise RequestRejected(ErrorCode.AUTH_FAILURE, "unknown job or bad ticket")
            if session.job_id is not None and session.job_id != job_id:
                raise RequestRejected(ErrorCode.AUTH_FAILURE, "session bound to another job")
            session.job_id = job_id
            return job

    def _holder_status(self, session: _Session, job: _Job | None) -> tuple[MsgType, bytes]:
        if job is None:
            status = HolderStatus(bytes(JOB_ID_SIZE), bytes(32), JobState.IDLE, 0)
        else:
            state, epoch = job.current_state()
            status = HolderStatus(job.job_id, job.secret, state, epoch)
        return self._reply(session, MsgType.STATUS, TaintedBytes(status.to_bytes(), session.channel.label))

    # -- holder handlers ----------------------------------------------------

    def _on_upload(self, session: _Session, plain: TaintedBytes) -> tuple[MsgType, bytes]:
        try:
            ticket, body = split_ticket(plain.data)
            features, labels = decode_upload(body)
        except PayloadError as exc:
            raise RequestRejected(ErrorCode.INVALID_DATA, str(exc)) from None
        job = self._resolve_job(session, ticket, create=True)
        with self._lock:
            if job.state is not JobState.IDLE or job.training is not None:
                raise RequestRejected(ErrorCode.PROTOCOL_VIOLATION, "upload after START_TRAIN")
            if not features:
                raise RequestRejected(ErrorCode.INVALID_DATA, "empty upload")
            dim = len(features[0])
            if job.features and dim != len(job.features[0]):
                raise RequestRejected(ErrorCode.INVALID_DATA, "input_dim changed between uploads")
            if self._config is not None:
                self._check_rows(features, labels, self._config)
            job.features.extend(features)
            job.labels.extend(labels)
        return self._holder_status(session, job)

    def _check_rows(self, features, labels, config: ModelConfig) -> None:
        try:
            Dataset(features, labels).check(config)
        except TrainingError as exc:
            raise RequestRejected(ErrorCode.INVALID_DATA, str(exc)) from None

    def _on_start_train(self, session: _Session, plain: TaintedBytes) -> tuple[MsgType, bytes]:
        try:
            ticket, _ = split_ticket(plain.data)
        except PayloadError as exc:
            raise RequestRejected(ErrorCode.INVALID_DATA, str(exc)) from None
        job = self._resolve_job(session, ticket)
        with self._lock:
            if self._config is None:
                raise RequestRejected(ErrorCode.NOT_PROVISIONED)
            if job.training is not None or job.state is not JobState.IDLE:
                raise RequestRejected(ErrorCode.PROTOCOL_VIOLATION, "training already started")
            if not job.labels:
                raise RequestRejected(ErrorCode.PROTOCOL_VIOLATION, "no data uploaded")
            config = self._config
            self._check_rows(job.features, job.labels, config)
            dataset = Dataset(job.features, job.labels, Label.HOLDER_SECRET)
            try:
                shards = partition(dataset, self._k)
            except Exception as exc:
                raise RequestRejected(ErrorCode.INVALID_DATA, str(exc)) from None
            job.config = config
            job.training = TrainingJob(job.job_id, self._k, config, shards)
            job.state = JobState.PENDING
            self._mark_training()
            thread = threading.Thread(target=self._train, args=(job,), daemon=True,
                                      name=f"job-{job.job_id.hex()[:8]}")
            self._threads.append(thread)
        thread.start()
        return self._holder_status(session, job)

    def _train(self, job: _Job) -> None:
        self._log(public(f"job {job.job_id.hex()[:8]} started".encode()))
        try:
            if self._spawn_trainer is None:
                raise JobFailed("no trainer factory")
            trainers = [self._spawn_trainer() for _ in range(job.training.k)]
            params = run_job(job.training, self, trainers, randbytes=self._randbytes)
        except Exception as exc:
            with self._lock:
                job.state, job.epoch = JobState.FAILED, job.training.epoch
            self._log(TaintedBytes(f"job {job.job_id.hex()[:8]} failed: {exc!r}".encode(),
                                   Label.BOTH_SECRET))
            self._log(public(f"job {job.job_id.hex()[:8]} failed".encode()))
            return
        with self._lock:
            job.params = params
            job.state, job.epoch = JobState.DONE, job.training.epoch
            if self.handle.state is EnclaveState.TRAINING:
                self.handle.advance(EnclaveState.SERVING)
        self._log(public(f"job {job.job_id.hex()[:8]} done".encode()))

    def _on_status(self, session: _Session, plain: TaintedBytes) -> tuple[MsgType, bytes]:
        try:
            ticket, _ = split_ticket(plain.data)
        except PayloadError as exc:
            raise RequestRejected(ErrorCode.INVALID_DATA, str(exc)) from None
        if ticket == NO_TICKET and session.job_id is None:
            return self._holder_status(session, None)
        return self._holder_status(session, self._resolve_job(session, ticket))

    def _on_query(self, session: _Session, plain: TaintedBytes) -> tuple[MsgType, bytes]:
        try:
            ticket, body = split_ticket(plain.data)
            features = decode_query(body)
        except PayloadError as exc:
            raise RequestRejected(ErrorCode.INVALID_DATA, str(exc)) from None
        job = self._resolve_job(session, ticket)
        state, _ = job.current_state()
        if state is JobState.FAILED:
            raise RequestRejected(ErrorCode.JOB_NOT_DONE, "job failed")
        if state is not JobState.DONE or job.params is None:
            raise RequestRejected(ErrorCode.PROTOCOL_VIOLATION, "query before training finished")
        if not features or len(features) > MAX_QUERY_ROWS:
            raise RequestRejected(ErrorCode.INVALID_DATA, "query row count")
        if any(len(row) != job.config.input_dim for row in features):
            raise RequestRejected(ErrorCode.INVALID_DATA, "query input_dim")
        classes = predict(job.params, job.config, features)
        return self._reply(session, MsgType.QUERY_RESP,
                           TaintedBytes(encode_predictions(classes), Label.BOTH_SECRET))

    # -- provider handlers --------------------------------------------------

    def _provider_status(self, session: _Session, job_id: bytes | None) -> tuple[MsgType, bytes]:
        with self._lock:
            job = self._jobs.get(job_id) if job_id else None
            if job_id is None and self._latest_job is not None:
                job = self._jobs[self._latest_job]
            state, epoch = job.current_state() if job is not None else (JobState.IDLE, 0)
        plaintext = TaintedBytes(encode_status(state, epoch), Label.BOTH_SECRET)
        return self._reply(session, MsgType.STATUS, plaintext)

    def _on_provision(self, session: _Session, plain: TaintedBytes) -> tuple[MsgType, bytes]:
        try:
            config = validate_config(plain.data)
        except ConfigRejected as exc:
            self._log(public(b"provision rejected"))
            raise RequestRejected(ErrorCode.CONFIG_REJECTED, exc.code) from None
        with self._lock:
            if self._config_bytes is not None and self._config_bytes != plain.data:
                raise RequestRejected(ErrorCode.ALREADY_PROVISIONED)
            if self._config is None:
                self._config = config
                self._config_bytes = plain.data
                self.handle.advance(EnclaveState.PROVISIONED)
        self._log(public(b"provisioned"))
        return self._provider_status(session, None)

    def _on_provider_status(self, session: _Session, plain: TaintedBytes) -> tuple[MsgType, bytes]:
        if self._config is None:
            raise RequestRejected(ErrorCode.PROTOCOL_VIOLATION, "STATUS before PROVISION")
        if plain.data and len(plain.data) != JOB_ID_SIZE:
            raise RequestRejected(ErrorCode.INVALID_DATA, "job id must be 16 bytes")
        return self._provider_status(session, plain.data or None)

    def _mark_training(self) -> None:
        if self.handle.state is EnclaveState.PROVISIONED:
            self.handle.advance(EnclaveState.TRAINING)

    _HOLDER = {
        MsgType.UPLOAD_DATA: _on_upload,
        MsgType.START_TRAIN: _on_start_train,
        MsgType.STATUS: _on_status,
        MsgType.QUERY: _on_query,
    }
    _PROVIDER = {
        MsgType.PROVISION: _on_provision,
        MsgType.STATUS: _on_provider_status,
    }
