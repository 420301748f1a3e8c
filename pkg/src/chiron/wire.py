"""Binary wire formats.

Frame: ``length (u32 BE, covers type + payload) || msg_type (u8) || payload``.
Every payload after ATTEST is a sealed record (see :mod:`chiron.channel`);
the plaintext layouts inside those records are defined here too.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Sequence

from .sandbox import JobState

MAX_FRAME = 16 * 1024 * 1024
MAX_PAYLOAD = MAX_FRAME - 1
_LEN = struct.Struct(">I")


class MsgType(enum.IntEnum):
    ATTEST_REQ = 0x01
    ATTEST_RESP = 0x02
    PROVISION = 0x03
    UPLOAD_DATA = 0x04
    START_TRAIN = 0x05
    STATUS = 0x06
    QUERY = 0x07
    QUERY_RESP = 0x08
    ERROR = 0x7F


class ErrorCode(enum.IntEnum):
    UNKNOWN_TYPE = 0x01
    PROTOCOL_VIOLATION = 0x02
    ROLE_VIOLATION = 0x03
    ATTESTATION_FAILURE = 0x04
    AUTH_FAILED = 0x05
    REPLAY = 0x06
    MALFORMED = 0x07
    JOB_NOT_DONE = 0x08
    AUTH_FAILURE = 0x09
    CONFIG_REJECTED = 0x0A
    NOT_PROVISIONED = 0x0B
    ALREADY_PROVISIONED = 0x0C
    INVALID_DATA = 0x0D
    POLICY_DENIED = 0x0E
    OVERSIZE = 0x0F
    LENGTH_ZERO = 0x10
    INTERNAL = 0x11


class SessionRole(enum.IntEnum):
    HOLDER = 0x01
    PROVIDER = 0x02


class FrameError(Exception):
    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class Frame:
    msg_type: int
    payload: bytes = b""


def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise FrameError("OVERSIZE")
    return _LEN.pack(1 + len(payload)) + bytes([msg_type]) + bytes(payload)


def decode_frame(buffer: bytearray) -> Frame | None:
    """Consume one frame from the front of ``buffer``; ``None`` if incomplete."""
    if len(buffer) < _LEN.size:
        return None
    (length,) = _LEN.unpack_from(buffer)
    if length == 0:
        raise FrameError("LENGTH_ZERO")
    if length > MAX_FRAME:
        raise FrameError("OVERSIZE")
    end = _LEN.size + length
    if len(buffer) < end:
        return None
    frame = Frame(buffer[_LEN.size], bytes(buffer[_LEN.size + 1:end]))
    del buffer[:end]
    return frame


class FrameDecoder:
    """Incremental decoder tolerant of arbitrary chunking."""

    def __init__(self) -> None:
        self._buffer = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buffer.extend(data)
        frames = []
        while (frame := decode_frame(self._buffer)) is not None:
            frames.append(frame)
        return frames

    @property
    def pending(self) -> int:
        return len(self._buffer)


def error_payload(code: ErrorCode) -> bytes:
    return bytes([code])


def parse_error(payload: bytes) -> ErrorCode | int:
    if not payload:
        return ErrorCode.MALFORMED
    try:
        return ErrorCode(payload[0])
    except ValueError:
        return payload[0]


# -- sealed plaintext layouts -------------------------------------------------

class PayloadError(ValueError):
    pass


_U32 = struct.Struct(">I")
_ROWS = struct.Struct(">II")
JOB_ID_SIZE = 16
JOB_SECRET_SIZE = 32
TICKET_SIZE = JOB_ID_SIZE + JOB_SECRET_SIZE
NO_TICKET = bytes(TICKET_SIZE)


def encode_features(features: Sequence[Sequence[float]]) -> bytes:
    rows = len(features)
    dim = len(features[0]) if rows else 0
    flat = [v for row in features for v in row]
    if len(flat) != rows * dim:
        raise PayloadError("ragged feature rows")
    return _ROWS.pack(rows, dim) + struct.pack(f">{len(flat)}d", *flat)


def _decode_features(raw: bytes) -> tuple[list[list[float]], int]:
    if len(raw) < _ROWS.size:
        raise PayloadError("truncated row header")
    rows, dim = _ROWS.unpack_from(raw)
    need = _ROWS.size + 8 * rows * dim
    if len(raw) < need:
        raise PayloadError("truncated feature block")
    flat = struct.unpack_from(f">{rows * dim}d", raw, _ROWS.size)
    return [list(flat[r * dim:(r + 1) * dim]) for r in range(rows)], need


def encode_upload(features: Sequence[Sequence[float]], labels: Sequence[int]) -> bytes:
    if len(features) != len(labels):
        raise PayloadError("features and labels differ in length")
    return encode_features(features) + struct.pack(f">{len(labels)}I", *labels)


def decode_upload(raw: bytes) -> tuple[list[list[float]], list[int]]:
    features, offset = _decode_features(raw)
    rows = len(features)
    if len(raw) != offset + 4 * rows:
        raise PayloadError("label block length mismatch")
    return features, list(struct.unpack_from(f">{rows}I", raw, offset))


def encode_query(features: Sequence[Sequence[float]]) -> bytes:
    return encode_features(features)


def decode_query(raw: bytes) -> list[list[float]]:
    features, offset = _decode_features(raw)
    if offset != len(raw):
        raise PayloadError("trailing bytes after query rows")
    return features


def encode_predictions(classes: Sequence[int]) -> bytes:
    return _U32.pack(len(classes)) + struct.pack(f">{len(classes)}I", *classes)


def decode_predictions(raw: bytes) -> list[int]:
    if len(raw) < 4:
        raise PayloadError("truncated prediction header")
    (count,) = _U32.unpack_from(raw)
    if len(raw) != 4 + 4 * count:
        raise PayloadError("prediction block length mismatch")
    return list(struct.unpack_from(f">{count}I", raw, 4))


def split_ticket(raw: bytes) -> tuple[bytes, bytes]:
    """Holder request plaintext is ``ticket (48) || body``."""
    if len(raw) < TICKET_SIZE:
        raise PayloadError("missing job ticket")
    return bytes(raw[:TICKET_SIZE]), bytes(raw[TICKET_SIZE:])


_HOLDER_STATUS = struct.Struct(f">{JOB_ID_SIZE}s{JOB_SECRET_SIZE}sBQ")


@dataclass(frozen=True)
class HolderStatus:
    job_id: bytes
    job_secret: bytes
    state: JobState
    epoch: int

    @property
    def ticket(self) -> bytes:
        return self.job_id + self.job_secret

    def to_bytes(self) -> bytes:
        return _HOLDER_STATUS.pack(self.job_id, self.job_secret, int(self.state), self.epoch)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "HolderStatus":
        if len(raw) != _HOLDER_STATUS.size:
            raise PayloadError("holder status length mismatch")
        job_id, secret, state, epoch = _HOLDER_STATUS.unpack(raw)
        return cls(job_id, secret, JobState(state), epoch)


_SYNC_HEADER = struct.Struct(">QI")


def encode_sync(round_index: int, values: Sequence[float]) -> bytes:
    return _SYNC_HEADER.pack(round_index, len(values)) + struct.pack(f">{len(values)}d", *values)


def decode_sync(raw: bytes) -> tuple[int, list[float]]:
    if len(raw) < _SYNC_HEADER.size:
        raise PayloadError("truncated sync header")
    round_index, count = _SYNC_HEADER.unpack_from(raw)
    if len(raw) != _SYNC_HEADER.size + 8 * count:
        raise PayloadError("sync value block length mismatch")
    return round_index, list(struct.unpack_from(f">{count}d", raw, _SYNC_HEADER.size))
