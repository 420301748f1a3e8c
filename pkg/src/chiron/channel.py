"""Attested key agreement and the AEAD record layer.

Handshake (fixed suite: X25519, HKDF-SHA-256, ChaCha20-Poly1305)::

    initiator -> responder   hello    = client_nonce(32) || client_eph_pub(32)
    responder -> initiator   response = enclave_eph_pub(32) || quote(160)

The quote's report_data is ``SHA-256(hello || enclave_eph_pub)`` zero padded
to 64 bytes, so a quote cannot be lifted into a different session.  Keys are
``HKDF(salt=SHA-256(hello || response), ikm=shared, info="chiron/c2e"|"chiron/e2c")``.

For enclave-to-enclave links the initiator is itself an enclave and sends a
``confirm`` quote bound to the full transcript, giving mutual attestation.
"""

from __future__ import annotations

import enum
import hashlib
import os
import struct
from dataclasses import dataclass, field
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .enclave import (
    QUOTE_SIZE,
    EnclaveHandle,
    Measurement,
    Quote,
    QuoteVerdict,
    generate_quote,
    pad_report_data,
    verify_quote,
)
from .taint import Label, TaintedBytes

NONCE_SIZE = 32
KEY_SIZE = 32
HELLO_SIZE = NONCE_SIZE + 32
RESPONSE_SIZE = 32 + QUOTE_SIZE
TAG_SIZE = 16
RECORD_HEADER = struct.Struct(">QI")
MAX_SEQ = 2**64 - 1

INFO_C2E = b"chiron/c2e"
INFO_E2C = b"chiron/e2c"
CONFIRM_CONTEXT = b"chiron/initiator-confirm"

RandBytes = Callable[[int], bytes]


class Role(enum.Enum):
    INITIATOR = "INITIATOR"
    RESPONDER = "RESPONDER"


class Phase(enum.Enum):
    HELLO_SENT = "HELLO_SENT"
    QUOTE_RECEIVED = "QUOTE_RECEIVED"
    ESTABLISHED = "ESTABLISHED"
    FAILED = "FAILED"


class Direction(enum.Enum):
    C2E = "C2E"
    E2C = "E2C"


class HandshakeError(Exception):
    """Handshake rejected; ``reason`` is one of BAD_SIGNATURE,
    MEASUREMENT_MISMATCH, TRANSCRIPT_MISMATCH, MALFORMED."""

    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class ChannelError(Exception):
    """Record rejected; ``reason`` is one of AUTH_FAILED, REPLAY, MALFORMED."""

    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class SequenceExhausted(ChannelError):
    def __init__(self) -> None:
        super().__init__("SEQUENCE_EXHAUSTED")


@dataclass
class SessionKeys:
    client_to_enclave_key: bytes
    enclave_to_client_key: bytes
    send_seq: int = 0
    recv_seq: int = 0
    label: Label = Label.BOTH_SECRET

    def key_for(self, direction: Direction) -> bytes:
        if direction is Direction.C2E:
            return self.client_to_enclave_key
        return self.enclave_to_client_key


@dataclass
class HandshakeState:
    role: Role
    local_eph_secret: bytes
    transcript: bytearray = field(default_factory=bytearray)
    phase: Phase = Phase.HELLO_SENT
    label: Label = Label.BOTH_SECRET
    keys: SessionKeys | None = None

    def _append(self, message: bytes) -> None:
        self.transcript.extend(message)

    @classmethod
    def responder(cls, label: Label = Label.BOTH_SECRET) -> "HandshakeState":
        return cls(Role.RESPONDER, b"", label=label)


@dataclass(frozen=True)
class Record:
    seq: int
    ciphertext: bytes
    tag: bytes

    def header(self) -> bytes:
        return RECORD_HEADER.pack(self.seq, len(self.ciphertext))

    def to_bytes(self) -> bytes:
        return self.header() + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Record":
        if len(raw) < RECORD_HEADER.size + TAG_SIZE:
            raise ChannelError("MALFORMED", "record too short")
        seq, length = RECORD_HEADER.unpack_from(raw)
        if len(raw) != RECORD_HEADER.size + length + TAG_SIZE:
            raise ChannelError("MALFORMED", "record length mismatch")
        body = raw[RECORD_HEADER.size:]
        return cls(seq, bytes(body[:length]), bytes(body[length:]))


def _public_bytes(secret: bytes) -> bytes:
    return X25519PrivateKey.from_private_bytes(secret).public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


def _shared_secret(secret: bytes, peer_public: bytes) -> bytes:
    try:
        return X25519PrivateKey.from_private_bytes(secret).exchange(
            X25519PublicKey.from_public_bytes(peer_public)
        )
    except ValueError as exc:  # low-order point
        raise HandshakeError("MALFORMED", "invalid ephemeral public key") from exc


def _derive_keys(shared: bytes, transcript: bytes, label: Label) -> SessionKeys:
    salt = hashlib.sha256(transcript).digest()

    def expand(info: bytes) -> bytes:
        return HKDF(algorithm=hashes.SHA256(), length=KEY_SIZE, salt=salt, info=info).derive(shared)

    return SessionKeys(expand(INFO_C2E), expand(INFO_E2C), label=label)


def transcript_binding(transcript: bytes, responder_eph_public: bytes) -> bytes:
    return pad_report_data(hashlib.sha256(transcript + responder_eph_public).digest())


def confirm_binding(transcript: bytes) -> bytes:
    return pad_report_data(hashlib.sha256(CONFIRM_CONTEXT + transcript).digest())


def _binding_matches(quote: Quote, expected_report_data: bytes) -> bool:
    return quote.report_data == expected_report_data


def _check_quote(quote: Quote, expected: Measurement, root_pk: bytes, binding: bytes) -> None:
    verdict = verify_quote(quote, expected, root_pk)
    if verdict is not QuoteVerdict.ACCEPT:
        raise HandshakeError(verdict.value)
    if not _binding_matches(quote, binding):
        raise HandshakeError("TRANSCRIPT_MISMATCH")


def initiate(client_nonce: bytes, randbytes: RandBytes = os.urandom,
             label: Label = Label.BOTH_SECRET) -> tuple[HandshakeState, bytes]:
    if len(client_nonce) != NONCE_SIZE:
        raise ValueError("client nonce must be 32 bytes")
    secret = bytes(randbytes(32))
    hello = bytes(client_nonce) + _public_bytes(secret)
    state = HandshakeState(Role.INITIATOR, secret, label=label)
    state._append(hello)
    return state, hello


def respond(state: HandshakeState, hello: bytes, enclave: EnclaveHandle,
            randbytes: RandBytes = os.urandom) -> bytes:
    """Responder (enclave) side. Derives the responder's keys into ``state.keys``."""
    enclave.ensure_alive()
    if state.role is not Role.RESPONDER or state.transcript:
        raise HandshakeError("MALFORMED", "responder state already used")
    if len(hello) != HELLO_SIZE:
        state.phase = Phase.FAILED
        raise HandshakeError("MALFORMED", f"hello must be {HELLO_SIZE} bytes")
    state._append(hello)
    state.local_eph_secret = bytes(randbytes(32))
    eph_public = _public_bytes(state.local_eph_secret)
    try:
        shared = _shared_secret(state.local_eph_secret, hello[NONCE_SIZE:])
    except HandshakeError:
        state.phase = Phase.FAILED
        raise
    quote = generate_quote(enclave, transcript_binding(bytes(state.transcript), eph_public))
    response = eph_public + quote.to_bytes()
    state._append(response)
    state.keys = _derive_keys(shared, bytes(state.transcript), state.label)
    state.phase = Phase.ESTABLISHED
    return response


def finish(state: HandshakeState, response: bytes, expected: Measurement,
           root_pk: bytes) -> SessionKeys:
    """Initiator side: verify the quote and its transcript binding, then derive keys."""
    if state.role is not Role.INITIATOR or state.phase is not Phase.HELLO_SENT:
        raise HandshakeError("MALFORMED", f"finish() in phase {state.phase.name}")
    try:
        if len(response) != RESPONSE_SIZE:
            raise HandshakeError("MALFORMED", f"response must be {RESPONSE_SIZE} bytes")
        eph_public, quote = bytes(response[:32]), Quote.from_bytes(bytes(response[32:]))
        _check_quote(quote, expected, root_pk, transcript_binding(bytes(state.transcript), eph_public))
        state.phase = Phase.QUOTE_RECEIVED
        shared = _shared_secret(state.local_eph_secret, eph_public)
    except HandshakeError:
        state.phase = Phase.FAILED
        raise
    state._append(response)
    state.keys = _derive_keys(shared, bytes(state.transcript), state.label)
    state.phase = Phase.ESTABLISHED
    return state.keys


def confirm(state: HandshakeState, enclave: EnclaveHandle) -> bytes:
    """Initiator enclave's own quote over the finished transcript."""
    if state.role is not Role.INITIATOR or state.phase is not Phase.ESTABLISHED:
        raise HandshakeError("MALFORMED", "confirm() before the handshake finished")
    return generate_quote(enclave, confirm_binding(bytes(state.transcript))).to_bytes()


def accept_confirm(state: HandshakeState, message: bytes, expected: Measurement,
                   root_pk: bytes) -> None:
    if state.role is not Role.RESPONDER or state.phase is not Phase.ESTABLISHED:
        raise HandshakeError("MALFORMED", "accept_confirm() without a responded handshake")
    try:
        if len(message) != QUOTE_SIZE:
            raise HandshakeError("MALFORMED", f"confirm must be {QUOTE_SIZE} bytes")
        _check_quote(Quote.from_bytes(bytes(message)), expected, root_pk,
                     confirm_binding(bytes(state.transcript)))
    except HandshakeError:
        state.phase = Phase.FAILED
        state.keys = None
        raise


def _nonce(seq: int) -> bytes:
    return bytes(4) + seq.to_bytes(8, "big")


def seal(keys: SessionKeys, direction: Direction, plaintext: TaintedBytes | bytes,
         aad: bytes = b"") -> Record:
    """Encrypt under the next send sequence number. The record is PUBLIC."""
    if keys.send_seq >= MAX_SEQ:
        raise SequenceExhausted()
    data = plaintext.data if isinstance(plaintext, TaintedBytes) else bytes(plaintext)
    seq = keys.send_seq
    header = RECORD_HEADER.pack(seq, len(data))
    sealed = ChaCha20Poly1305(keys.key_for(direction)).encrypt(_nonce(seq), data, header + aad)
    keys.send_seq = seq + 1
    return Record(seq, sealed[:-TAG_SIZE], sealed[-TAG_SIZE:])


def open_record(keys: SessionKeys, direction: Direction, record: Record | bytes,
                aad: bytes = b"") -> TaintedBytes:
    """Decrypt the next in-order record; the plaintext carries the channel label."""
    if not isinstance(record, Record):
        record = Record.from_bytes(bytes(record))
    if len(record.tag) != TAG_SIZE:
        raise ChannelError("MALFORMED", "bad tag length")
    if record.seq != keys.recv_seq:
        raise ChannelError("REPLAY", f"expected seq {keys.recv_seq}, got {record.seq}")
    try:
        data = ChaCha20Poly1305(keys.key_for(direction)).decrypt(
            _nonce(record.seq), record.ciphertext + record.tag, record.header() + aad
        )
    except InvalidTag as exc:
        raise ChannelError("AUTH_FAILED") from exc
    keys.recv_seq += 1
    return TaintedBytes(data, keys.label)


class SecureChannel:
    """One endpoint of an established channel; picks directions from its role."""

    def __init__(self, keys: SessionKeys, role: Role) -> None:
        self.keys = keys
        self.role = role
        if role is Role.INITIATOR:
            self._out, self._in = Direction.C2E, Direction.E2C
        else:
            self._out, self._in = Direction.E2C, Direction.C2E

    @property
    def label(self) -> Label:
        return self.keys.label

    def seal(self, plaintext: TaintedBytes | bytes, aad: bytes = b"") -> Record:
        return seal(self.keys, self._out, plaintext, aad)

    def open(self, record: Record | bytes, aad: bytes = b"") -> TaintedBytes:
        return open_record(self.keys, self._in, record, aad)
