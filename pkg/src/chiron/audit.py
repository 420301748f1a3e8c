"""Adversarial scenarios against a fresh in-process deployment.

Each :class:`AttackScenario` plays one adversary (malicious provider,
malicious host, or network attacker) against an honest deployment and
reports which denial it ran into.  :func:`run_scenario` returns HELD only when
that denial is the expected one, the boundary audit shows no non-PUBLIC
buffer delivered out of an enclave, no secret canary shows up where it must
not, and the attacker recovered nothing.

:data:`MUTATIONS` are security-critical faults injected with
``unittest.mock.patch``; each must turn at least one scenario VIOLATED.
"""

from __future__ import annotations

import contextlib
import enum
import hashlib
import json
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence
from unittest import mock

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .boundary import PolicyDenied
from .channel import (
    HandshakeError,
    HandshakeState,
    Record,
    Role,
    SecureChannel,
    _derive_keys,
    _public_bytes,
    _shared_secret,
    respond,
)
from .client import (
    AttestationFailure,
    ClientError,
    ConnectionClosed,
    HolderClient,
    LoopbackTransport,
    ProviderClient,
    RemoteError,
)
from .coordinator import TrainerEnclave
from .datasets import make_blobs
from .enclave import CodeImage, Crossing, Platform, measure
from .runtime import ServiceEnclave, runtime_image
from .sandbox import (
    ALLOW,
    STATUS,
    Activation,
    ConfigRejected,
    JobState,
    LayerSpec,
    ModelConfig,
    SgdOptimizer,
    encode_config,
    validate_config,
)
from .service import FATAL, Deployment, HostSession
from .taint import Label
from .wire import ErrorCode, Frame, MsgType, NO_TICKET, encode_upload, parse_error


class Adversary(enum.Enum):
    PROVIDER = "PROVIDER"
    HOST = "HOST"
    NETWORK = "NETWORK"


class Outcome(enum.Enum):
    DENIED = "DENIED"      # policy monitor or config validator said no
    REJECTED = "REJECTED"  # cryptographic or protocol check refused, session lives on
    CLOSED = "CLOSED"      # fatal error, session torn down


@dataclass(frozen=True)
class Observation:
    outcome: Outcome | None
    evidence: str
    breach: str | None = None


@dataclass(frozen=True)
class AttackScenario:
    name: str
    adversary: Adversary
    script: Callable[["World"], Observation]
    expected_outcome: Outcome
    seed: int = 0


@dataclass(frozen=True)
class Verdict:
    held: bool
    evidence: str

    @property
    def name(self) -> str:
        return "HELD" if self.held else "VIOLATED"


# -- boundary audit ---------------------------------------------------------

@dataclass
class BoundaryReport:
    violations: list[dict] = field(default_factory=list)
    withheld: list[dict] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"violations": self.violations, "withheld": self.withheld}


def _describe(index: int, c: Crossing) -> dict:
    return {
        "index": index,
        "enclave": c.enclave_id,
        "direction": c.direction,
        "channel": c.channel,
        "label": c.label.value,
        "bytes": len(c.data),
        "sha256": hashlib.sha256(c.data).hexdigest()[:16],
    }


def audit_boundary(transcript: Iterable[Crossing]) -> BoundaryReport:
    """List every non-PUBLIC crossing.

    Delivered ones are violations; ones the monitor blocked are reported
    separately as ``withheld``.
    """
    report = BoundaryReport()
    for i, c in enumerate(transcript):
        if c.label is Label.PUBLIC:
            continue
        (report.violations if c.delivered else report.withheld).append(_describe(i, c))
    return report


# -- scenario world ---------------------------------------------------------

SCENARIO_CONFIG = ModelConfig(
    seed=11,
    layers=(LayerSpec(2, 4, Activation.TANH), LayerSpec(4, 2)),
    optimizer=SgdOptimizer(0.1, 8, 3),
)
ROGUE_IMAGE = runtime_image("chiron-runtime/0.1.0+rogue")
STALE_IMAGE = runtime_image("chiron-runtime/0.0.9")


class Tap:
    """Transport wrapper: records traffic and lets an attacker rewrite it."""

    def __init__(self, inner, world: "World",
                 outbound: Callable[[Frame], Frame] | None = None,
                 inbound: Callable[[Frame], Frame] | None = None) -> None:
        self.inner = inner
        self.world = world
        self.outbound = outbound
        self.inbound = inbound
        self.sent: list[Frame] = []
        self.received: list[Frame] = []

    def exchange(self, frame: Frame) -> Frame:
        self.sent.append(frame)
        if self.outbound is not None:
            frame = self.outbound(frame)
        reply = self.inner.exchange(frame)
        if self.inbound is not None:
            reply = self.inbound(reply)
        self.received.append(reply)
        return reply

    def close(self) -> None:
        self.inner.close()


class FakeEnclave:
    """Attacker endpoint that answers the handshake itself and reads records."""

    def __init__(self, handshake: Callable[[bytes], tuple[bytes, object]]) -> None:
        self._handshake = handshake
        self.channel: SecureChannel | None = None
        self.stolen: list[bytes] = []

    def exchange(self, frame: Frame) -> Frame:
        if frame.msg_type == MsgType.ATTEST_REQ:
            response, keys = self._handshake(frame.payload[1:])
            self.channel = SecureChannel(keys, Role.RESPONDER)
            return Frame(MsgType.ATTEST_RESP, response)
        try:
            self.stolen.append(self.channel.open(frame.payload, bytes([frame.msg_type])).data)
        except Exception:  # noqa: BLE001 - the attacker just fails to read
            pass
        raise ConnectionClosed("attacker hung up")

    def close(self) -> None:
        pass


class _AuditHolder(HolderClient):
    def __init__(self, world: "World", *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.world = world

    def request(self, msg_type, plaintext, expect):
        plain = super().request(msg_type, plaintext, expect)
        self.world.holder_view.append(plain.data)
        return plain


class _AuditProvider(ProviderClient):
    def __init__(self, world: "World", *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.world = world

    def request(self, msg_type, plaintext, expect):
        plain = super().request(msg_type, plaintext, expect)
        self.world.provider_view.append(plain.data)
        return plain


class World:
    """A fresh platform, deployment and pair of honest parties."""

    def __init__(self, seed: int = 0, *, image: CodeImage | None = None,
                 program: type[ServiceEnclave] = ServiceEnclave,
                 trainer_image: CodeImage | None = None,
                 trainer_program: type[TrainerEnclave] = TrainerEnclave) -> None:
        self.seed = seed
        self.rng = random.Random(seed)
        self.client_rng = random.Random(seed ^ 0x5EED)
        root = Ed25519PrivateKey.from_private_bytes(self.rng.randbytes(32))
        self.platform = Platform(root)
        self.deployment = Deployment(self.platform, trainers=1, image=image, program=program,
                                     trainer_image=trainer_image,
                                     trainer_program=trainer_program,
                                     randbytes=self.rng.randbytes)
        self.expected = measure(runtime_image())
        self.root_public_key = self.platform.root_public_key
        self.config = SCENARIO_CONFIG
        self.config_bytes = encode_config(self.config)
        self.dataset = make_blobs(40, 0.3, seed)
        self.feature_canary = encode_upload(self.dataset.features[:2], [0, 0])[8:40]
        self.sessions: list[HostSession] = []
        self.holder_view: list[bytes] = []
        self.provider_view: list[bytes] = []

    def session(self) -> HostSession:
        s = self.deployment.new_session()
        self.sessions.append(s)
        return s

    def tap(self, session: HostSession | None = None, **rewrite) -> Tap:
        return Tap(LoopbackTransport(session or self.session()), self, **rewrite)

    def holder(self, transport=None, ticket: bytes = NO_TICKET) -> _AuditHolder:
        return _AuditHolder(self, transport or self.tap(), self.expected, self.root_public_key,
                            randbytes=self.client_rng.randbytes, ticket=ticket)

    def provider(self, transport=None) -> _AuditProvider:
        return _AuditProvider(self, transport or self.tap(), self.expected,
                              self.root_public_key, randbytes=self.client_rng.randbytes)

    def provisioned(self) -> _AuditProvider:
        p = self.provider()
        p.attest()
        p.provision(self.config_bytes)
        return p

    def trained_holder(self) -> _AuditHolder:
        h = self.holder()
        h.attest()
        h.upload(self.dataset)
        h.start_train()
        h.wait(timeout=60)
        return h

    def host_view(self) -> list[bytes]:
        return [payload for s in self.sessions for payload in s.observed]

    def close(self) -> None:
        self.deployment.enclave.join(timeout=30)
        self.deployment.shutdown()


# -- outcome helpers --------------------------------------------------------

def _classify(exc: BaseException) -> tuple[Outcome, str]:
    if isinstance(exc, (AttestationFailure, HandshakeError)):
        return Outcome.REJECTED, f"attestation: {getattr(exc, 'reason', exc)}"
    if isinstance(exc, ConfigRejected):
        return Outcome.DENIED, f"config: {exc.code}"
    if isinstance(exc, PolicyDenied):
        return Outcome.DENIED, f"policy: {exc.reason}"
    if isinstance(exc, RemoteError):
        code = exc.code
        name = getattr(code, "name", str(code))
        if code in FATAL:
            return Outcome.CLOSED, f"ERROR({name})"
        if code in (ErrorCode.CONFIG_REJECTED, ErrorCode.POLICY_DENIED):
            return Outcome.DENIED, f"ERROR({name})"
        return Outcome.REJECTED, f"ERROR({name})"
    raise exc


def attempt(action: Callable[[], object]) -> tuple[Outcome | None, str]:
    try:
        action()
    except (ClientError, HandshakeError, ConfigRejected, PolicyDenied) as exc:
        return _classify(exc)
    return None, "accepted"


def inject(session: HostSession, msg_type: MsgType, payload: bytes) -> tuple[Outcome | None, str]:
    """Host-side injection of a raw frame into a live session."""
    replies = session.handle(Frame(msg_type, payload))
    if replies and replies[0].msg_type != MsgType.ERROR:
        return None, f"accepted, reply 0x{replies[0].msg_type:02x}"
    code = parse_error(replies[0].payload) if replies else None
    name = getattr(code, "name", str(code))
    if session.closed:
        return Outcome.CLOSED, f"ERROR({name}), session closed"
    return Outcome.REJECTED, f"ERROR({name})"


def _session_of(client) -> HostSession:
    return client.transport.inner.session


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


# -- provider scenarios -----------------------------------------------------

def provider_extra_field(world: World) -> Observation:
    doc = json.loads(world.config_bytes)
    doc["exfil_channel"] = "TO_PROVIDER"
    raw = json.dumps(doc, sort_keys=True).encode()
    try:
        validate_config(raw)
        local = "accepted"
    except ConfigRejected as exc:
        local = f"{exc.code} at {exc.path}"
    p = world.provider()
    p.attest()
    outcome, detail = attempt(lambda: p.provision(raw))
    return Observation(outcome, f"validator: {local}; enclave: {detail}")


def provider_uploads_data(world: World) -> Observation:
    p = world.provisioned()
    body = NO_TICKET + encode_upload(world.dataset.features, world.dataset.labels)
    outcome, detail = attempt(lambda: p.request(MsgType.UPLOAD_DATA, body, MsgType.STATUS))
    return Observation(outcome, detail)


def provider_queries_model(world: World) -> Observation:
    p = world.provisioned()
    world.trained_holder()
    body = NO_TICKET + b"\x00" * 8
    outcome, detail = attempt(lambda: p.request(MsgType.QUERY, body, MsgType.QUERY_RESP))
    return Observation(outcome, detail)


def provider_reads_loss_log(world: World) -> Observation:
    world.provisioned()
    world.trained_holder()
    log = [c for c in world.platform.boundary.snapshot()
           if c.channel == "TO_LOG" and c.direction == "OUT" and c.delivered]
    leaked = [c.data for c in log if b"loss" in c.data]
    withheld = [c.data for c in log if c.data.startswith(b"[withheld")]
    if leaked:
        return Observation(None, f"{len(leaked)} loss lines in host log",
                           breach=f"host log carried {leaked[0][:40]!r}")
    if withheld:
        return Observation(Outcome.DENIED, f"{len(withheld)} data-derived log lines withheld")
    return Observation(None, "no log lines observed")


def provider_status_probe(world: World) -> Observation:
    p = world.provisioned()
    h = world.trained_holder()
    guess = h.ticket  # pretend the provider somehow obtained it
    outcome, detail = attempt(lambda: p.request(MsgType.STATUS, guess, MsgType.STATUS))
    p2 = world.provider()
    p2.attest()
    p2.provision(world.config_bytes)
    p2.status()
    odd = [v for v in world.provider_view if len(v) != STATUS.size]
    if odd:
        return Observation(outcome, detail, f"provider received a {len(odd[0])}-byte plaintext")
    return Observation(outcome, f"{detail}; all {len(world.provider_view)} provider replies "
                                f"are {STATUS.size}-byte status messages")


def provider_swaps_config(world: World) -> Observation:
    world.provisioned()
    world.trained_holder()
    other = encode_config(SCENARIO_CONFIG.with_seed(12345))
    p = world.provider()
    p.attest()
    outcome, detail = attempt(lambda: p.provision(other))
    return Observation(outcome, detail)


# -- host scenarios ---------------------------------------------------------

def host_replays_upload(world: World) -> Observation:
    world.provisioned()
    h = world.holder()
    h.attest()
    h.upload(world.dataset)
    captured = h.transport.sent[-1]
    h.status()
    outcome, detail = inject(_session_of(h), MsgType.UPLOAD_DATA, captured.payload)
    return Observation(outcome, detail)


def host_reorders_records(world: World) -> Observation:
    h = world.holder()
    h.attest()
    aad = bytes([MsgType.STATUS])
    first = h.channel.seal(NO_TICKET, aad).to_bytes()
    second = h.channel.seal(NO_TICKET, aad).to_bytes()
    del first  # held back by the host
    outcome, detail = inject(_session_of(h), MsgType.STATUS, second)
    return Observation(outcome, detail)


def host_flips_bit(world: World) -> Observation:
    h = world.holder()
    h.attest()
    body = NO_TICKET + encode_upload(world.dataset.features, world.dataset.labels)
    record = bytearray(h.channel.seal(body, bytes([MsgType.UPLOAD_DATA])).to_bytes())
    record[12 + 50] ^= 0x01
    outcome, detail = inject(_session_of(h), MsgType.UPLOAD_DATA, bytes(record))
    return Observation(outcome, detail)


class _DumpingService(ServiceEnclave):
    """Host-built program that writes holder plaintext straight to the host."""

    def _on_upload(self, session, plain):
        self.platform.log_crossing(self.handle, "OUT", "HOST_DUMP", plain.label, plain.data)
        return super()._on_upload(session, plain)


class _DumpingTrainer(TrainerEnclave):
    def ecall_load(self, record: bytes) -> None:
        plain = self._channel.open(bytes(record), b"chiron/load")
        self.platform.log_crossing(self.handle, "OUT", "HOST_DUMP", plain.label, plain.data)
        self._channel.keys.recv_seq -= 1
        super().ecall_load(record)


def host_loads_rogue_image(world: World) -> Observation:
    rogue = World(world.seed, image=ROGUE_IMAGE, program=_DumpingService)
    world.platform = rogue.platform  # the audit follows the rogue platform
    world.sessions = rogue.sessions
    h = rogue.holder()
    outcome, detail = attempt(h.attest)
    if outcome is None:
        attempt(lambda: h.upload(rogue.dataset))
    rogue.close()
    return Observation(outcome, detail)


def host_substitutes_trainer(world: World) -> Observation:
    rogue = World(world.seed, trainer_image=ROGUE_IMAGE,
                  trainer_program=_DumpingTrainer)
    world.platform = rogue.platform
    world.sessions = rogue.sessions
    rogue.provisioned()
    h = rogue.trained_holder()
    status = h.status()
    rogue.close()
    shipped = [c for c in rogue.platform.boundary.snapshot() if c.channel == "HOST_DUMP"]
    if status.state is JobState.FAILED and not shipped:
        return Observation(Outcome.REJECTED, "trainer attestation failed, job FAILED, no shard sent")
    return Observation(None, f"job {status.state.name}, {len(shipped)} shard dumps")


def host_cross_session_splice(world: World) -> Observation:
    a, b = world.holder(), world.holder()
    a.attest()
    b.attest()
    body = NO_TICKET + encode_upload(world.dataset.features, world.dataset.labels)
    record = a.channel.seal(body, bytes([MsgType.UPLOAD_DATA])).to_bytes()
    outcome, detail = inject(_session_of(b), MsgType.UPLOAD_DATA, record)
    return Observation(outcome, detail)


def host_truncates_record(world: World) -> Observation:
    h = world.holder()
    h.attest()
    record = h.channel.seal(NO_TICKET, bytes([MsgType.STATUS])).to_bytes()
    outcome, detail = inject(_session_of(h), MsgType.STATUS, record[:10])
    return Observation(outcome, detail)


# -- network scenarios ------------------------------------------------------

def _stolen(fake: FakeEnclave, outcome: Outcome | None) -> str | None:
    if fake.stolen:
        return f"attacker decrypted {sum(map(len, fake.stolen))} bytes of holder plaintext"
    if outcome is None:
        return "handshake with attacker endpoint accepted"
    return None


def _victim_upload(world: World, fake: FakeEnclave) -> Observation:
    victim = world.holder(fake)
    outcome, detail = attempt(victim.attest)
    if outcome is None:
        attempt(lambda: victim.upload(world.dataset))
    return Observation(outcome, detail, _stolen(fake, outcome))


def network_stale_quote_splice(world: World) -> Observation:
    recorded = []
    for _ in range(2):
        h = world.holder()
        h.attest()
        recorded.append(h.transport.received[0].payload)
    stale_quote = recorded[0][32:]
    secret = world.rng.randbytes(32)

    def handshake(hello: bytes):
        response = _public_bytes(secret) + stale_quote
        shared = _shared_secret(secret, hello[32:])
        return response, _derive_keys(shared, hello + response, Label.PUBLIC)

    return _victim_upload(world, FakeEnclave(handshake))


def network_forged_quote(world: World) -> Observation:
    own = Platform()
    handle = own.create_enclave(runtime_image())

    def handshake(hello: bytes):
        state = HandshakeState.responder(Label.PUBLIC)
        return respond(state, hello, handle, world.rng.randbytes), state.keys

    return _victim_upload(world, FakeEnclave(handshake))


def network_relays_stale_build(world: World) -> Observation:
    handle = world.platform.create_enclave(STALE_IMAGE)

    def handshake(hello: bytes):
        state = HandshakeState.responder(Label.PUBLIC)
        return respond(state, hello, handle, world.rng.randbytes), state.keys

    return _victim_upload(world, FakeEnclave(handshake))


def network_substitutes_ephemeral(world: World) -> Observation:
    own = _public_bytes(world.rng.randbytes(32))

    def swap(frame: Frame) -> Frame:
        if frame.msg_type == MsgType.ATTEST_REQ:
            return Frame(frame.msg_type, frame.payload[:33] + own)
        return frame

    h = world.holder(world.tap(outbound=swap))
    outcome, detail = attempt(h.attest)
    return Observation(outcome, detail)


def network_truncates_response(world: World) -> Observation:
    def cut(frame: Frame) -> Frame:
        if frame.msg_type == MsgType.ATTEST_RESP:
            return Frame(frame.msg_type, frame.payload[:100])
        return frame

    h = world.holder(world.tap(inbound=cut))
    outcome, detail = attempt(h.attest)
    return Observation(outcome, detail)


def network_keystream_reuse(world: World) -> Observation:
    """First request carries the all-zero ticket; the second the real one.
    Under nonce reuse their ciphertext XOR is the victim's job ticket."""
    world.provisioned()
    victim = world.holder()
    victim.attest()
    victim.upload(world.dataset)
    victim.status()
    r0 = Record.from_bytes(victim.transport.sent[1].payload)
    r1 = Record.from_bytes(victim.transport.sent[2].payload)
    guess = _xor(r0.ciphertext[:48], r1.ciphertext[:48])
    thief = world.holder(ticket=guess)
    thief.attest()
    outcome, detail = attempt(thief.status)
    breach = "job ticket recovered from ciphertext" if guess == victim.ticket else None
    return Observation(outcome, detail, breach)


def network_injects_forged_record(world: World) -> Observation:
    h = world.holder()
    h.attest()
    forged = Record(0, world.rng.randbytes(len(NO_TICKET)), world.rng.randbytes(16))
    outcome, detail = inject(_session_of(h), MsgType.STATUS, forged.to_bytes())
    return Observation(outcome, detail)


SCENARIOS: tuple[AttackScenario, ...] = (
    AttackScenario("provider_extra_field", Adversary.PROVIDER, provider_extra_field, Outcome.DENIED),
    AttackScenario("provider_uploads_data", Adversary.PROVIDER, provider_uploads_data, Outcome.CLOSED),
    AttackScenario("provider_queries_model", Adversary.PROVIDER, provider_queries_model, Outcome.CLOSED),
    AttackScenario("provider_reads_loss_log", Adversary.PROVIDER, provider_reads_loss_log, Outcome.DENIED),
    AttackScenario("provider_status_probe", Adversary.PROVIDER, provider_status_probe, Outcome.REJECTED),
    AttackScenario("provider_swaps_config", Adversary.PROVIDER, provider_swaps_config, Outcome.REJECTED),
    AttackScenario("host_replays_upload", Adversary.HOST, host_replays_upload, Outcome.CLOSED),
    AttackScenario("host_reorders_records", Adversary.HOST, host_reorders_records, Outcome.CLOSED),
    AttackScenario("host_flips_bit", Adversary.HOST, host_flips_bit, Outcome.CLOSED),
    AttackScenario("host_loads_rogue_image", Adversary.HOST, host_loads_rogue_image, Outcome.REJECTED),
    AttackScenario("host_substitutes_trainer", Adversary.HOST, host_substitutes_trainer, Outcome.REJECTED),
    AttackScenario("host_cross_session_splice", Adversary.HOST, host_cross_session_splice, Outcome.CLOSED),
    AttackScenario("host_truncates_record", Adversary.HOST, host_truncates_record, Outcome.CLOSED),
    AttackScenario("network_stale_quote_splice", Adversary.NETWORK, network_stale_quote_splice, Outcome.REJECTED),
    AttackScenario("network_forged_quote", Adversary.NETWORK, network_forged_quote, Outcome.REJECTED),
    AttackScenario("network_relays_stale_build", Adversary.NETWORK, network_relays_stale_build, Outcome.REJECTED),
    AttackScenario("network_substitutes_ephemeral", Adversary.NETWORK, network_substitutes_ephemeral, Outcome.REJECTED),
    AttackScenario("network_truncates_response", Adversary.NETWORK, network_truncates_response, Outcome.REJECTED),
    AttackScenario("network_keystream_reuse", Adversary.NETWORK, network_keystream_reuse, Outcome.REJECTED),
    AttackScenario("network_injects_forged_record", Adversary.NETWORK, network_injects_forged_record, Outcome.CLOSED),
)


def _canary_leaks(world: World) -> list[str]:
    found = []
    if any(world.config_bytes in v for v in world.holder_view):
        found.append("config bytes in a holder-visible message")
    for buf in world.host_view():
        if world.config_bytes in buf:
            found.append("config bytes visible to the host")
            break
        if world.feature_canary in buf:
            found.append("holder feature bytes visible to the host")
            break
    return found


def run_scenario(s: AttackScenario) -> Verdict:
    world = World(s.seed)
    try:
        try:
            obs = s.script(world)
        except Exception as exc:  # noqa: BLE001 - an unexpected crash is evidence too
            obs = Observation(None, f"script raised {exc!r}")
        finally:
            world.close()
        report = audit_boundary(world.platform.boundary.snapshot())
    except Exception as exc:  # noqa: BLE001
        return Verdict(False, f"harness error {exc!r}")
    problems = []
    if obs.outcome is not s.expected_outcome:
        got = obs.outcome.value if obs.outcome else "no denial"
        problems.append(f"expected {s.expected_outcome.value}, got {got}")
    if obs.breach:
        problems.append(obs.breach)
    for v in report.violations:
        problems.append(f"{v['label']} crossed on {v['channel']}")
    problems.extend(_canary_leaks(world))
    if problems:
        return Verdict(False, "; ".join(problems) + f" ({obs.evidence})")
    return Verdict(True, obs.evidence)


# -- mutations --------------------------------------------------------------

def _skip_quote_verification():
    from .enclave import QuoteVerdict
    return mock.patch("chiron.channel.verify_quote", lambda *a, **k: QuoteVerdict.ACCEPT)


def _skip_transcript_binding():
    return mock.patch("chiron.channel._binding_matches", lambda *a, **k: True)


def _skip_policy_check():
    return mock.patch("chiron.boundary.policy_check", lambda req: ALLOW)


def _reuse_nonce():
    return mock.patch("chiron.channel._nonce", lambda seq: bytes(12))


MUTATIONS: dict[str, Callable[[], contextlib.AbstractContextManager]] = {
    "SKIP_QUOTE_VERIFICATION": _skip_quote_verification,
    "SKIP_TRANSCRIPT_BINDING": _skip_transcript_binding,
    "SKIP_POLICY_CHECK": _skip_policy_check,
    "REUSE_NONCE": _reuse_nonce,
}


@contextlib.contextmanager
def mutated(name: str) -> Iterator[None]:
    with MUTATIONS[name]():
        yield


def run_suite(scenarios: Sequence[AttackScenario] = SCENARIOS) -> list[tuple[AttackScenario, Verdict]]:
    return [(s, run_scenario(s)) for s in scenarios]


def run_all(mutations: bool = True, scenarios: Sequence[AttackScenario] = SCENARIOS) -> dict:
    results = run_suite(scenarios)
    report: dict = {
        "scenarios": [
            {"name": s.name, "adversary": s.adversary.value,
             "expected": s.expected_outcome.value, "verdict": v.name, "evidence": v.evidence}
            for s, v in results
        ],
    }
    ok = all(v.held for _, v in results)
    if mutations:
        report["mutations"] = []
        for name in MUTATIONS:
            with mutated(name):
                hits = [s.name for s, v in run_suite(scenarios) if not v.held]
            report["mutations"].append({"name": name, "detected_by": hits})
            ok = ok and bool(hits)
    report["held"] = sum(v.held for _, v in results)
    report["total"] = len(results)
    report["ok"] = ok
    return report
