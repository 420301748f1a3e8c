"""Simulated trusted-hardware substrate.

A :class:`Platform` owns a randomly generated Ed25519 root key that stands in
for the hardware vendor's attestation root.  Enclaves are identified by the
SHA-256 measurement of their code image; quotes are root-key signatures over
``measurement || report_data``.

Isolation is a module-boundary discipline: enclave programs keep their state
in private attributes and every buffer that leaves through an entry point is
recorded in the platform's :class:`BoundaryLog` together with its taint label.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .taint import Label

MEASUREMENT_SIZE = 32
REPORT_DATA_SIZE = 64
SIGNATURE_SIZE = 64
QUOTE_SIZE = MEASUREMENT_SIZE + REPORT_DATA_SIZE + SIGNATURE_SIZE


class EnclaveError(Exception):
    pass


class PlatformNotInitialized(EnclaveError):
    pass


class EnclaveTerminated(EnclaveError):
    pass


class IllegalTransition(EnclaveError):
    pass


@dataclass(frozen=True)
class CodeImage:
    data: bytes


@dataclass(frozen=True)
class Measurement:
    digest: bytes

    def __post_init__(self) -> None:
        if len(self.digest) != MEASUREMENT_SIZE:
            raise ValueError(f"measurement must be {MEASUREMENT_SIZE} bytes")

    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def fromhex(cls, text: str) -> "Measurement":
        return cls(bytes.fromhex(text.strip()))


@dataclass(frozen=True)
class Quote:
    measurement: Measurement
    report_data: bytes
    signature: bytes

    def to_bytes(self) -> bytes:
        return self.measurement.digest + self.report_data + self.signature

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Quote":
        if len(raw) != QUOTE_SIZE:
            raise ValueError(f"quote must be {QUOTE_SIZE} bytes, got {len(raw)}")
        m = MEASUREMENT_SIZE
        r = m + REPORT_DATA_SIZE
        return cls(Measurement(raw[:m]), raw[m:r], raw[r:])


class QuoteVerdict(enum.Enum):
    ACCEPT = "ACCEPT"
    BAD_SIGNATURE = "BAD_SIGNATURE"
    MEASUREMENT_MISMATCH = "MEASUREMENT_MISMATCH"

    def __bool__(self) -> bool:
        return self is QuoteVerdict.ACCEPT


class EnclaveState(enum.IntEnum):
    CREATED = 0
    PROVISIONED = 1
    TRAINING = 2
    SERVING = 3
    TERMINATED = 4


@dataclass(frozen=True)
class Crossing:
    """One buffer crossing the enclave boundary."""

    enclave_id: int
    direction: str  # "IN" or "OUT"
    channel: str
    label: Label
    data: bytes
    delivered: bool = True


class BoundaryLog:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: list[Crossing] = []

    def record(self, crossing: Crossing) -> None:
        with self._lock:
            self._entries.append(crossing)

    def snapshot(self) -> list[Crossing]:
        with self._lock:
            return list(self._entries)

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()

    def __len__(self) -> int:
        return len(self._entries)


def measure(image: CodeImage) -> Measurement:
    return Measurement(hashlib.sha256(image.data).digest())


def _signed_body(measurement: Measurement, report_data: bytes) -> bytes:
    return measurement.digest + report_data


@dataclass
class EnclaveHandle:
    id: int
    measurement: Measurement
    state: EnclaveState = EnclaveState.CREATED
    _platform: "Platform | None" = field(default=None, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def platform(self) -> "Platform":
        if self._platform is None:
            raise PlatformNotInitialized("enclave is not attached to a platform")
        return self._platform

    @property
    def terminated(self) -> bool:
        return self.state is EnclaveState.TERMINATED

    def advance(self, new_state: EnclaveState) -> None:
        with self._lock:
            if self.state is EnclaveState.TERMINATED:
                raise EnclaveTerminated(f"enclave {self.id} is terminated")
            if new_state is not EnclaveState.TERMINATED and new_state != self.state + 1:
                raise IllegalTransition(f"{self.state.name} -> {new_state.name}")
            self.state = new_state

    def terminate(self) -> None:
        with self._lock:
            self.state = EnclaveState.TERMINATED

    def ensure_alive(self) -> None:
        if self.state is EnclaveState.TERMINATED:
            raise EnclaveTerminated(f"enclave {self.id} is terminated")


class Platform:
    """The simulated CPU: root attestation key, enclave factory, boundary log."""

    def __init__(self, root_key: Ed25519PrivateKey | None = None) -> None:
        self._root_key = root_key if root_key is not None else Ed25519PrivateKey.generate()
        self.root_public_key: bytes = self._root_key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        self.boundary = BoundaryLog()
        self._ids = itertools.count(1)
        self._running = True
        self._enclaves: dict[int, EnclaveHandle] = {}

    @property
    def running(self) -> bool:
        return self._running

    def shutdown(self) -> None:
        self._running = False
        for handle in self._enclaves.values():
            handle.terminate()

    def create_enclave(self, image: CodeImage) -> EnclaveHandle:
        if not self._running:
            raise PlatformNotInitialized("platform has been shut down")
        handle = EnclaveHandle(next(self._ids), measure(image), _platform=self)
        self._enclaves[handle.id] = handle
        return handle

    def generate_quote(self, enclave: EnclaveHandle, report_data: bytes) -> Quote:
        if enclave._platform is not self:
            raise EnclaveError("enclave belongs to a different platform")
        enclave.ensure_alive()
        if len(report_data) != REPORT_DATA_SIZE:
            raise ValueError(f"report_data must be {REPORT_DATA_SIZE} bytes")
        signature = self._root_key.sign(_signed_body(enclave.measurement, report_data))
        return Quote(enclave.measurement, bytes(report_data), signature)

    def log_crossing(self, enclave: EnclaveHandle, direction: str, channel: Any,
                     label: Label, data: bytes, delivered: bool = True) -> None:
        name = getattr(channel, "name", str(channel))
        self.boundary.record(Crossing(enclave.id, direction, name, label, bytes(data), delivered))


def create_enclave(platform: Platform, image: CodeImage) -> EnclaveHandle:
    return platform.create_enclave(image)


def generate_quote(enclave: EnclaveHandle, report_data: bytes) -> Quote:
    return enclave.platform.generate_quote(enclave, report_data)


def verify_quote(quote: Quote, expected: Measurement, root_public_key: bytes) -> QuoteVerdict:
    try:
        key = Ed25519PublicKey.from_public_bytes(root_public_key)
        key.verify(quote.signature, _signed_body(quote.measurement, quote.report_data))
    except (InvalidSignature, ValueError):
        return QuoteVerdict.BAD_SIGNATURE
    if quote.measurement != expected:
        return QuoteVerdict.MEASUREMENT_MISMATCH
    return QuoteVerdict.ACCEPT


def pad_report_data(data: bytes) -> bytes:
    if len(data) > REPORT_DATA_SIZE:
        raise ValueError("report data longer than 64 bytes")
    return data + bytes(REPORT_DATA_SIZE - len(data))


# Root key files hold the raw 32-byte Ed25519 seed (private) or public key, hex encoded.

def load_or_create_root_key(path: str | Path) -> Ed25519PrivateKey:
    path = Path(path)
    if path.exists():
        seed = bytes.fromhex(path.read_text().strip())
        key = Ed25519PrivateKey.from_private_bytes(seed)
    else:
        key = Ed25519PrivateKey.generate()
        seed = key.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )
        path.write_text(seed.hex() + "\n")
        path.chmod(0o600)
    pub = key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    Path(str(path) + ".pub").write_text(pub.hex() + "\n")
    return key


def load_root_public_key(path: str | Path) -> bytes:
    raw = bytes.fromhex(Path(path).read_text().strip())
    if len(raw) != 32:
        raise ValueError("root public key must be 32 bytes")
    return raw
