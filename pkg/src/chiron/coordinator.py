"""Distributed training across K trainer enclaves with synchronous averaging.

The aggregator (the serving enclave) attests every trainer mutually, ships it
the config and its shard over a sealed channel, and then runs a barrier per
sync round: each trainer seals its parameters, the aggregator averages the K
contributions in trainer order and seals the result back.

Every trainer contributes to the same number of rounds.  Trainers with fewer
local batches keep submitting their current parameters until the last
(terminal) round, whose average is the final model.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .boundary import EnclaveProgram
from .channel import (
    HandshakeError,
    HandshakeState,
    Role,
    SecureChannel,
    accept_confirm,
    confirm,
    finish,
    initiate,
    respond,
)
from .enclave import EnclaveState
from .sandbox import IoChannel, JobState, ModelConfig, encode_config, validate_config
from .taint import Label, TaintedBytes, join_all
from .trainer import Dataset, ParameterVector, TrainingHooks, init_params, run_epochs
from .wire import decode_sync, decode_upload, encode_sync, encode_upload

AAD_SYNC = b"chiron/sync"
AAD_LOAD = b"chiron/load"
BARRIER_TIMEOUT = 300.0
_LOAD_HEADER = struct.Struct(">QI")


class CoordinatorError(Exception):
    pass


class TooFewRows(CoordinatorError):
    pass


class LengthMismatch(CoordinatorError):
    pass


class EmptyInput(CoordinatorError):
    pass


class RoundRejected(CoordinatorError):
    pass


class JobFailed(CoordinatorError):
    pass


def partition(dataset: Dataset, k: int) -> list[Dataset]:
    """Round-robin sharding: row i goes to shard i mod k."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if dataset.n_rows < k:
        raise TooFewRows(f"{dataset.n_rows} rows cannot fill {k} shards")
    return [dataset.subset(range(s, dataset.n_rows, k)) for s in range(k)]


def average(contributions: Sequence[ParameterVector | Sequence[float]]) -> ParameterVector:
    """Elementwise mean, summed in list order."""
    if not contributions:
        raise EmptyInput("no contributions")
    vectors = [c.values if isinstance(c, ParameterVector) else list(c) for c in contributions]
    n = len(vectors[0])
    if any(len(v) != n for v in vectors):
        raise LengthMismatch("contributions differ in length")
    acc = list(vectors[0])
    for v in vectors[1:]:
        for i in range(n):
            acc[i] += v[i]
    k = len(vectors)
    label = join_all(*(c.label for c in contributions if isinstance(c, ParameterVector)))
    return ParameterVector([a / k for a in acc], label)


_TRANSITIONS = {
    JobState.PENDING: {JobState.RUNNING},
    JobState.RUNNING: {JobState.SYNCING},
    JobState.SYNCING: {JobState.RUNNING, JobState.DONE},
    JobState.DONE: set(),
    JobState.FAILED: set(),
}


@dataclass
class SyncRound:
    round_index: int
    contributions: list[list[float]]
    result: list[float]


@dataclass
class TrainingJob:
    job_id: bytes
    k: int
    config_ref: ModelConfig
    shards: list[Dataset]
    state: JobState = JobState.PENDING
    epoch: int = 0
    record_rounds: bool = False
    rounds: list[SyncRound] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self) -> None:
        if not 1 <= self.k <= 16:
            raise ValueError("k must be in [1, 16]")
        if len(self.shards) != self.k:
            raise ValueError("number of shards must equal k")

    def transition(self, new: JobState) -> None:
        with self._lock:
            if new is JobState.FAILED:
                self.state = new
                return
            if new not in _TRANSITIONS[self.state]:
                raise CoordinatorError(f"job {self.state.name} -> {new.name}")
            self.state = new


def rounds_for(config: ModelConfig, shards: Sequence[Dataset]) -> int:
    """Number of sync rounds every trainer takes part in (terminal round included)."""
    bs = config.optimizer.batch_size
    most = 0
    for shard in shards:
        batches = config.optimizer.epochs * (-(-shard.n_rows // bs))
        most = max(most, batches // config.sync_period)
    return most + 1


class TrainerEnclave(EnclaveProgram):
    """Trusted program running inside one trainer enclave."""

    def __init__(self, handle, root_public_key: bytes,
                 randbytes: Callable[[int], bytes] = os.urandom) -> None:
        super().__init__(handle, root_public_key)
        self._randbytes = randbytes
        self._hs: HandshakeState | None = None
        self._channel: SecureChannel | None = None
        self._config: ModelConfig | None = None
        self._shard: Dataset | None = None
        self._rounds = 0
        self.epochs_done = 0

    def ecall_accept(self, hello: bytes) -> bytes:
        hello = self._ingress("FROM_PARAM_SERVER", hello)
        self._hs = HandshakeState.responder(Label.BOTH_SECRET)
        response = respond(self._hs, hello, self.handle, self._randbytes)
        return self._egress(IoChannel.TO_PARAM_SERVER, TaintedBytes(response))

    def ecall_confirm(self, message: bytes) -> None:
        message = self._ingress("FROM_PARAM_SERVER", message)
        if self._hs is None:
            raise HandshakeError("MALFORMED", "no handshake in progress")
        # the aggregator must run the same code as this trainer
        accept_confirm(self._hs, message, self.measurement, self.root_public_key)
        self._channel = SecureChannel(self._hs.keys, Role.RESPONDER)

    def ecall_load(self, record: bytes) -> None:
        record = self._ingress("FROM_PARAM_SERVER", record)
        if self._channel is None:
            raise CoordinatorError("load before mutual attestation")
        plain = self._channel.open(record, AAD_LOAD).data
        rounds, clen = _LOAD_HEADER.unpack_from(plain)
        start = _LOAD_HEADER.size
        self._config = validate_config(plain[start:start + clen])
        features, labels = decode_upload(plain[start + clen:])
        self._shard = Dataset(features, labels, Label.HOLDER_SECRET)
        self._shard.check(self._config)
        self._rounds = rounds
        self.handle.advance(EnclaveState.PROVISIONED)

    def ecall_train(self, submit: Callable[[bytes], bytes],
                    progress: Callable[[int], None] | None = None) -> None:
        if self._config is None or self._shard is None or self._channel is None:
            raise CoordinatorError("train before load")
        self.handle.advance(EnclaveState.TRAINING)
        hooks = _TrainerHooks(self, submit, progress)
        params = run_epochs(self._config, self._shard, init_params(self._config), hooks)
        while hooks.round_index < self._rounds:
            params = hooks.sync(params)

    def _sync(self, submit: Callable[[bytes], bytes], round_index: int,
              params: ParameterVector) -> ParameterVector:
        plaintext = TaintedBytes(encode_sync(round_index, params.values), Label.BOTH_SECRET)
        out = self._send_sealed(IoChannel.TO_PARAM_SERVER, self._channel, plaintext, AAD_SYNC)
        reply = self._ingress("FROM_PARAM_SERVER", submit(out))
        got_round, values = decode_sync(self._channel.open(reply, AAD_SYNC).data)
        if got_round != round_index or len(values) != len(params):
            raise RoundRejected(f"aggregator answered round {got_round} for {round_index}")
        return ParameterVector(values, Label.BOTH_SECRET)


class _TrainerHooks(TrainingHooks):
    def __init__(self, program: TrainerEnclave, submit: Callable[[bytes], bytes],
                 progress: Callable[[int], None] | None) -> None:
        self.program = program
        self.submit = submit
        self.progress = progress
        self.round_index = 0

    def sync(self, params: ParameterVector) -> ParameterVector:
        out = self.program._sync(self.submit, self.round_index, params)
        self.round_index += 1
        return out

    def on_sync(self, params: ParameterVector, batches_done: int) -> ParameterVector:
        return self.sync(params)

    def on_epoch_end(self, epoch: int, mean_loss: float) -> None:
        # loss is data-derived: the policy withholds this line from the host log
        self.program._log(TaintedBytes(f"epoch {epoch} mean loss {mean_loss!r}".encode(),
                                       Label.BOTH_SECRET))
        self.program.epochs_done = epoch + 1
        if self.progress is not None:
            self.progress(epoch + 1)


class RoundObserver:
    """Test and monitoring hook, called after each committed round."""

    def on_round(self, job: TrainingJob, round_index: int) -> None:
        pass


class Aggregator:
    """Aggregator half of a job; runs in the serving enclave."""

    def __init__(self, job: TrainingJob, program: EnclaveProgram,
                 channels: Sequence[SecureChannel], n_params: int, total_rounds: int,
                 observer: RoundObserver | None = None) -> None:
        self.job = job
        self.program = program
        self.channels = list(channels)
        self.n_params = n_params
        self.total_rounds = total_rounds
        self.observer = observer
        self._lock = threading.Lock()
        self._next_round = [0] * job.k
        self._pending: list[list[float] | None] = [None] * job.k
        self._round = 0
        self._result: list[float] | None = None
        self._barrier = threading.Barrier(job.k, action=self._commit, timeout=BARRIER_TIMEOUT)
        self.final: ParameterVector | None = None

    def submit(self, idx: int, raw: bytes) -> bytes:
        raw = self.program._ingress(IoChannel.TO_PARAM_SERVER.value, raw)
        plain = self.channels[idx].open(raw, AAD_SYNC)
        round_index, values = decode_sync(plain.data)
        with self._lock:
            if round_index != self._next_round[idx]:
                raise RoundRejected(
                    f"trainer {idx}: round {round_index}, expected {self._next_round[idx]}")
            if len(values) != self.n_params:
                raise LengthMismatch(f"trainer {idx} sent {len(values)} values")
            self._next_round[idx] = round_index + 1
            self._pending[idx] = values
            if self.job.state is JobState.RUNNING:
                self.job.transition(JobState.SYNCING)
        self._barrier.wait()
        result = self._result
        reply = TaintedBytes(encode_sync(round_index, result), Label.BOTH_SECRET)
        return self.program._send_sealed(IoChannel.TO_PARAM_SERVER, self.channels[idx],
                                         reply, AAD_SYNC)

    def _commit(self) -> None:
        contributions = list(self._pending)
        result = average(contributions).values
        self._result = result
        if self.job.record_rounds:
            self.job.rounds.append(SyncRound(self._round, contributions, list(result)))
        last = self._round + 1 == self.total_rounds
        if last:
            self.final = ParameterVector(list(result), Label.BOTH_SECRET)
        else:
            self.job.transition(JobState.RUNNING)
        self._pending = [None] * self.job.k
        if self.observer is not None:
            self.observer.on_round(self.job, self._round)
        self._round += 1

    def abort(self) -> None:
        self._barrier.abort()


def _attest_trainer(aggregator: EnclaveProgram, trainer: TrainerEnclave,
                    randbytes: Callable[[int], bytes]) -> SecureChannel:
    state, hello = initiate(randbytes(32), randbytes, Label.BOTH_SECRET)
    hello = aggregator._egress(IoChannel.TO_PARAM_SERVER, TaintedBytes(hello))
    response = aggregator._ingress("FROM_TRAINER", trainer.ecall_accept(hello))
    keys = finish(state, response, aggregator.measurement, aggregator.root_public_key)
    message = aggregator._egress(IoChannel.TO_PARAM_SERVER,
                                 TaintedBytes(confirm(state, aggregator.handle)))
    trainer.ecall_confirm(message)
    return SecureChannel(keys, Role.INITIATOR)


def run_job(job: TrainingJob, aggregator: EnclaveProgram, trainers: Sequence[TrainerEnclave],
            observer: RoundObserver | None = None,
            randbytes: Callable[[int], bytes] = os.urandom) -> ParameterVector:
    """Drive a job to completion; the returned model stays with the caller (the
    serving enclave).  Any failure marks the job FAILED and raises JobFailed."""
    if len(trainers) != job.k:
        raise ValueError("need exactly k trainer enclaves")
    config = job.config_ref
    try:
        # attestation first: no shard leaves before every trainer is verified
        channels = [_attest_trainer(aggregator, t, randbytes) for t in trainers]
        total_rounds = rounds_for(config, job.shards)
        config_bytes = encode_config(config)
        for trainer, sc, shard in zip(trainers, channels, job.shards):
            body = (_LOAD_HEADER.pack(total_rounds, len(config_bytes)) + config_bytes
                    + encode_upload(shard.features, shard.labels))
            trainer.ecall_load(aggregator._send_sealed(
                IoChannel.TO_PARAM_SERVER, sc, TaintedBytes(body, Label.BOTH_SECRET), AAD_LOAD))
    except Exception as exc:
        job.transition(JobState.FAILED)
        raise JobFailed(f"setup failed: {exc}") from exc

    agg = Aggregator(job, aggregator, channels, config.n_params, total_rounds, observer)
    epochs_seen = [0] * job.k
    errors: list[BaseException] = []

    def progress(idx: int, epochs: int) -> None:
        epochs_seen[idx] = epochs
        job.epoch = min(epochs_seen)

    def work(idx: int) -> None:
        try:
            trainers[idx].ecall_train(lambda raw: agg.submit(idx, raw),
                                      lambda e: progress(idx, e))
        except BaseException as exc:  # noqa: BLE001 - any trainer fault fails the job
            errors.append(exc)
            agg.abort()

    job.transition(JobState.RUNNING)
    threads = [threading.Thread(target=work, args=(i,), name=f"trainer-{i}", daemon=True)
               for i in range(job.k)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for trainer in trainers:
        trainer.handle.terminate()

    if errors or agg.final is None:
        job.transition(JobState.FAILED)
        first = errors[0] if errors else CoordinatorError("no terminal round")
        raise JobFailed(f"training failed: {first!r}") from first
    job.transition(JobState.DONE)
    return agg.final
