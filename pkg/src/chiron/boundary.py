"""Enclave entry/exit discipline shared by all trusted programs.

Every buffer leaving an enclave goes through :meth:`EnclaveProgram._egress`,
which consults :func:`chiron.sandbox.policy_check` and records the crossing in
the platform's boundary log.  Inbound buffers are logged by ``_ingress``.
"""

from __future__ import annotations

import logging

from .channel import SecureChannel
from .enclave import EnclaveHandle
from .sandbox import IoChannel, IoRequest, policy_check
from .taint import Label, TaintedBytes, public

log = logging.getLogger("chiron.enclave")


class PolicyDenied(Exception):
    def __init__(self, channel: IoChannel, reason: str | None) -> None:
        super().__init__(f"{channel.value}: {reason}")
        self.channel = channel
        self.reason = reason


class EnclaveProgram:
    def __init__(self, handle: EnclaveHandle, root_public_key: bytes) -> None:
        self.handle = handle
        self.root_public_key = root_public_key
        self.log_lines: list[str] = []

    @property
    def platform(self):
        return self.handle.platform

    @property
    def measurement(self):
        return self.handle.measurement

    def _egress(self, channel: IoChannel, payload: TaintedBytes,
                plaintext: TaintedBytes | None = None) -> bytes:
        self.handle.ensure_alive()
        decision = policy_check(IoRequest(channel, payload, plaintext))
        if not decision:
            self.platform.log_crossing(self.handle, "OUT", channel, payload.label,
                                       payload.data, delivered=False)
            raise PolicyDenied(channel, decision.reason)
        self.platform.log_crossing(self.handle, "OUT", channel, payload.label, payload.data)
        return payload.data

    def _send_sealed(self, channel: IoChannel, sc: SecureChannel, plaintext: TaintedBytes,
                     aad: bytes = b"") -> bytes:
        record = sc.seal(plaintext, aad)
        return self._egress(channel, public(record.to_bytes()), plaintext)

    def _ingress(self, channel: str, data: bytes) -> bytes:
        self.handle.ensure_alive()
        self.platform.log_crossing(self.handle, "IN", channel, Label.PUBLIC, data)
        return bytes(data)

    def _log(self, message: TaintedBytes) -> None:
        """Write a diagnostic line to the host log if policy allows it."""
        try:
            data = self._egress(IoChannel.TO_LOG, message)
        except PolicyDenied as denied:
            data = f"[withheld: {denied.reason}]".encode()
            self.platform.log_crossing(self.handle, "OUT", IoChannel.TO_LOG, Label.PUBLIC, data)
        line = data.decode("utf-8", "replace")
        self.log_lines.append(line)
        log.info("enclave %d: %s", self.handle.id, line)
