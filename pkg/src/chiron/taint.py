"""Secrecy labels attached to byte buffers.

Labels form a small lattice::

            BOTH_SECRET
           /           \\
    HOLDER_SECRET   PROVIDER_SECRET
           \\           /
              PUBLIC

Labels are sticky: every derived buffer carries the join of its sources.
The record layer's ``seal`` is the only place a label is dropped to PUBLIC.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass


class Label(enum.Enum):
    PUBLIC = "PUBLIC"
    HOLDER_SECRET = "HOLDER_SECRET"
    PROVIDER_SECRET = "PROVIDER_SECRET"
    BOTH_SECRET = "BOTH_SECRET"

    def __le__(self, other: "Label") -> bool:
        return taint_join(self, other) is other


def taint_join(a: Label, b: Label) -> Label:
    if a is b:
        return a
    if a is Label.PUBLIC:
        return b
    if b is Label.PUBLIC:
        return a
    return Label.BOTH_SECRET


def join_all(*labels: Label) -> Label:
    out = Label.PUBLIC
    for label in labels:
        out = taint_join(out, label)
    return out


@dataclass(frozen=True)
class TaintedBytes:
    data: bytes
    label: Label = Label.PUBLIC

    def __post_init__(self) -> None:
        if not isinstance(self.data, bytes):
            object.__setattr__(self, "data", bytes(self.data))

    def __len__(self) -> int:
        return len(self.data)

    def __getitem__(self, key: slice | int) -> "TaintedBytes":
        if isinstance(key, int):
            key = slice(key, key + 1 if key != -1 else None)
        return TaintedBytes(self.data[key], self.label)

    def __add__(self, other: "TaintedBytes | bytes") -> "TaintedBytes":
        if isinstance(other, TaintedBytes):
            return TaintedBytes(self.data + other.data, taint_join(self.label, other.label))
        return TaintedBytes(self.data + bytes(other), self.label)

    def __radd__(self, other: bytes) -> "TaintedBytes":
        return TaintedBytes(bytes(other) + self.data, self.label)

    def derive(self, data: bytes, *others: "TaintedBytes") -> "TaintedBytes":
        """Wrap ``data`` computed from this buffer (and ``others``)."""
        return TaintedBytes(data, join_all(self.label, *(o.label for o in others)))

    @property
    def is_public(self) -> bool:
        return self.label is Label.PUBLIC


def public(data: bytes) -> TaintedBytes:
    return TaintedBytes(bytes(data), Label.PUBLIC)
