"""Confinement of the provider's training specification.

The provider's "code" is a declarative :class:`ModelConfig` interpreted by
trusted platform logic.  Everything the enclave emits goes through
:func:`policy_check`; the only data that may reach the provider is the fixed
status vocabulary (job state + epoch counter).
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass
from typing import Any

from .taint import Label, TaintedBytes

SCHEMA_VERSION = 1
MAX_LAYERS = 8
MAX_DIM = 4096
MAX_BATCH = 4096
MAX_EPOCHS = 10000
MAX_LEARNING_RATE = 10.0
MAX_SEED = 2**64 - 1


class Activation(str, enum.Enum):
    RELU = "RELU"
    TANH = "TANH"
    IDENTITY = "IDENTITY"


class LayerKind(str, enum.Enum):
    DENSE = "DENSE"


class Loss(str, enum.Enum):
    SOFTMAX_CROSS_ENTROPY = "SOFTMAX_CROSS_ENTROPY"


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: Activation = Activation.IDENTITY
    kind: LayerKind = LayerKind.DENSE


@dataclass(frozen=True)
class SgdOptimizer:
    learning_rate: float
    batch_size: int
    epochs: int


@dataclass(frozen=True)
class ModelConfig:
    seed: int
    layers: tuple[LayerSpec, ...]
    optimizer: SgdOptimizer
    sync_period: int = 1
    loss: Loss = Loss.SOFTMAX_CROSS_ENTROPY
    schema_version: int = SCHEMA_VERSION

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def n_classes(self) -> int:
        return self.layers[-1].output_dim

    @property
    def n_params(self) -> int:
        total = 0
        for layer in self.layers:
            total += layer.input_dim * layer.output_dim + layer.output_dim
        return total

    def with_seed(self, seed: int) -> "ModelConfig":
        return ModelConfig(seed, self.layers, self.optimizer, self.sync_period,
                           self.loss, self.schema_version)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "layers": [
                {
                    "kind": layer.kind.value,
                    "input_dim": layer.input_dim,
                    "output_dim": layer.output_dim,
                    "activation": layer.activation.value,
                }
                for layer in self.layers
            ],
            "loss": self.loss.value,
            "optimizer": {
                "kind": "SGD",
                "learning_rate": self.optimizer.learning_rate,
                "batch_size": self.optimizer.batch_size,
                "epochs": self.optimizer.epochs,
            },
            "sync_period": self.sync_period,
        }


def encode_config(config: ModelConfig) -> bytes:
    """Canonical encoding: compact UTF-8 JSON with sorted keys."""
    return json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode()


class ConfigRejected(Exception):
    """``code`` is PARSE_ERROR, DIM_MISMATCH, LIMIT_EXCEEDED or UNKNOWN_FIELD."""

    def __init__(self, code: str, path: str, detail: str = "") -> None:
        super().__init__(f"{code} at {path or '<root>'}" + (f": {detail}" if detail else ""))
        self.code = code
        self.path = path
        self.detail = detail


_TOP_FIELDS = ("schema_version", "seed", "layers", "loss", "optimizer", "sync_period")
_LAYER_FIELDS = ("kind", "input_dim", "output_dim", "activation")
_OPTIMIZER_FIELDS = ("kind", "learning_rate", "batch_size", "epochs")


def _no_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise ValueError(f"duplicate key {key!r}")
        out[key] = value
    return out


def _reject_constant(name: str) -> Any:
    raise ValueError(f"non-finite literal {name}")


def _object(value: Any, path: str, allowed: tuple[str, ...]) -> dict[str, Any]:
    if not isinstance(value, dict):
        raise ConfigRejected("PARSE_ERROR", path, "expected an object")
    for key in value:
        if key not in allowed:
            raise ConfigRejected("UNKNOWN_FIELD", f"{path}.{key}" if path else key)
    for key in allowed:
        if key not in value:
            raise ConfigRejected("PARSE_ERROR", f"{path}.{key}" if path else key, "missing field")
    return value


def _int(value: Any, path: str, lo: int, hi: int | None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigRejected("PARSE_ERROR", path, "expected an integer")
    if value < lo or (hi is not None and value > hi):
        raise ConfigRejected("LIMIT_EXCEEDED", path, f"{value} outside [{lo}, {hi}]")
    return value


def _enum(enum_cls: type[enum.Enum], value: Any, path: str) -> Any:
    try:
        return enum_cls(value)
    except ValueError:
        raise ConfigRejected("PARSE_ERROR", path, f"unknown value {value!r}") from None


def validate_config(raw: bytes) -> ModelConfig:
    """Parse and check a canonical config encoding.

    Total over byte strings: every input either yields a config or raises
    :class:`ConfigRejected`.
    """
    try:
        doc = json.loads(
            bytes(raw).decode("utf-8"),
            object_pairs_hook=_no_duplicates,
            parse_constant=_reject_constant,
        )
    except (UnicodeDecodeError, ValueError, RecursionError, TypeError) as exc:
        raise ConfigRejected("PARSE_ERROR", "", str(exc)[:200]) from None

    top = _object(doc, "", _TOP_FIELDS)
    version = _int(top["schema_version"], "schema_version", 0, None)
    if version != SCHEMA_VERSION:
        raise ConfigRejected("PARSE_ERROR", "schema_version", f"unsupported version {version}")
    seed = _int(top["seed"], "seed", 0, MAX_SEED)

    raw_layers = top["layers"]
    if not isinstance(raw_layers, list):
        raise ConfigRejected("PARSE_ERROR", "layers", "expected a list")
    if not 1 <= len(raw_layers) <= MAX_LAYERS:
        raise ConfigRejected("LIMIT_EXCEEDED", "layers", f"{len(raw_layers)} layers")
    layers = []
    for i, raw_layer in enumerate(raw_layers):
        path = f"layers[{i}]"
        entry = _object(raw_layer, path, _LAYER_FIELDS)
        kind = _enum(LayerKind, entry["kind"], f"{path}.kind")
        input_dim = _int(entry["input_dim"], f"{path}.input_dim", 1, MAX_DIM)
        output_dim = _int(entry["output_dim"], f"{path}.output_dim", 1, MAX_DIM)
        activation = _enum(Activation, entry["activation"], f"{path}.activation")
        if layers and input_dim != layers[-1].output_dim:
            raise ConfigRejected("DIM_MISMATCH", f"{path}.input_dim",
                                 f"{input_dim} != {layers[-1].output_dim}")
        layers.append(LayerSpec(input_dim, output_dim, activation, kind))
    if layers[-1].activation is not Activation.IDENTITY:
        raise ConfigRejected("LIMIT_EXCEEDED", f"layers[{len(layers) - 1}].activation",
                             "final layer must be IDENTITY")

    loss = _enum(Loss, top["loss"], "loss")

    opt = _object(top["optimizer"], "optimizer", _OPTIMIZER_FIELDS)
    if opt["kind"] != "SGD":
        raise ConfigRejected("PARSE_ERROR", "optimizer.kind", f"unknown value {opt['kind']!r}")
    lr = opt["learning_rate"]
    if isinstance(lr, bool) or not isinstance(lr, (int, float)):
        raise ConfigRejected("PARSE_ERROR", "optimizer.learning_rate", "expected a number")
    in_range = 0 < lr <= MAX_LEARNING_RATE  # exact for ints of any size
    if not (in_range and (isinstance(lr, int) or math.isfinite(lr))):
        raise ConfigRejected("LIMIT_EXCEEDED", "optimizer.learning_rate", f"{lr} outside (0, 10]")
    lr = float(lr)
    batch_size = _int(opt["batch_size"], "optimizer.batch_size", 1, MAX_BATCH)
    epochs = _int(opt["epochs"], "optimizer.epochs", 1, MAX_EPOCHS)

    sync_period = _int(top["sync_period"], "sync_period", 1, None)

    return ModelConfig(seed, tuple(layers), SgdOptimizer(lr, batch_size, epochs),
                       sync_period, loss, version)


# -- status vocabulary ------------------------------------------------------

class JobState(enum.IntEnum):
    IDLE = 0
    PENDING = 1
    RUNNING = 2
    SYNCING = 3
    DONE = 4
    FAILED = 5


STATUS = struct.Struct(">BQ")
HANDSHAKE_RESPONSE_SIZE = 32 + 160  # enclave ephemeral key + quote


def encode_status(state: JobState, epoch: int) -> bytes:
    return STATUS.pack(int(state), epoch)


def decode_status(raw: bytes) -> tuple[JobState, int]:
    if len(raw) != STATUS.size:
        raise ValueError("not a status message")
    state, epoch = STATUS.unpack(raw)
    return JobState(state), epoch


def is_status_message(raw: bytes) -> bool:
    try:
        decode_status(raw)
    except ValueError:
        return False
    return True


# -- egress policy ----------------------------------------------------------

class IoChannel(enum.Enum):
    TO_HOLDER_CHANNEL = "TO_HOLDER_CHANNEL"
    TO_PARAM_SERVER = "TO_PARAM_SERVER"
    TO_PROVIDER = "TO_PROVIDER"
    TO_LOG = "TO_LOG"


@dataclass(frozen=True)
class IoRequest:
    """A buffer about to leave the enclave.

    ``plaintext`` is the pre-seal content when ``payload`` is a sealed record;
    the monitor runs inside the enclave and needs it to check the provider
    vocabulary.
    """

    channel: IoChannel
    payload: TaintedBytes
    plaintext: TaintedBytes | None = None


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.allowed


ALLOW = Decision(True)


def policy_check(req: IoRequest) -> Decision:
    if req.payload.label is not Label.PUBLIC:
        return Decision(False, "SECRET_EGRESS")
    if req.channel is IoChannel.TO_PROVIDER:
        if req.plaintext is None:
            # unsealed: only the fixed-size attestation handshake response
            if len(req.payload) != HANDSHAKE_RESPONSE_SIZE:
                return Decision(False, "NOT_IN_VOCABULARY")
        elif not is_status_message(req.plaintext.data):
            return Decision(False, "NOT_IN_VOCABULARY")
    return ALLOW


POLICY_DESCRIPTION: dict[str, Any] = {
    "egress": {
        IoChannel.TO_HOLDER_CHANNEL.value: "sealed",
        IoChannel.TO_PARAM_SERVER.value: "sealed",
        IoChannel.TO_PROVIDER.value: "sealed-status-vocabulary",
        IoChannel.TO_LOG.value: "public-only",
    },
    "status_vocabulary": {"states": [s.name for s in JobState], "epoch": "u64"},
    "limits": {
        "max_layers": MAX_LAYERS,
        "max_dim": MAX_DIM,
        "max_batch": MAX_BATCH,
        "max_epochs": MAX_EPOCHS,
        "max_learning_rate": MAX_LEARNING_RATE,
    },
}
