"""Adversary scenarios scripted against a live broker over TCP.

Each scenario drives one or more raw MQTT connections (victim, adversary,
observer), records every byte in a shared :class:`Transcript`, and fails
with :class:`ScenarioFailure` as soon as the broker deviates from the
expected behaviour.  Connections synchronise on explicit ``expect`` calls,
so given a broker with a fixed nonce seed a scenario always produces the
same bytes.

The adversary here sees the full channel and the broker's registry, but
never the victim's signing key.
"""

from __future__ import annotations

import asyncio
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Awaitable, Callable, Iterable

from . import codec
from .client import Client, read_packet
from .codec import Auth, Connack, Connect, Disconnect, Pingreq, Pingresp, Publish, ReasonCode, Suback, Subscribe
from .identity import derive_client_id
from .nonce import NONCE_SIZE
from .sigscheme import SigningKey, derive_public_key, sign

SMOKER = "SMOKER"
SENT, RECEIVED, CLOSED = ">", "<", "x"


class ScenarioFailure(AssertionError):
    pass


class ScriptTimeout(ScenarioFailure):
    pass


class BrokerUnreachable(ConnectionError):
    pass


@dataclass(frozen=True)
class Record:
    timestamp: float
    conn: str
    direction: str
    data: bytes

    @property
    def packet(self) -> codec.Packet | None:
        return codec.decode_packet(self.data) if self.data else None


@dataclass
class Transcript:
    records: list[Record] = field(default_factory=list)

    def add(self, conn: str, direction: str, data: bytes = b"") -> None:
        self.records.append(Record(time.time(), conn, direction, bytes(data)))

    def flow(self, conn: str | None = None) -> list[tuple[str, str, str]]:
        """``(conn, direction, packet name)`` triples, optionally for one connection."""
        out = []
        for r in self.records:
            if conn is not None and r.conn != conn:
                continue
            name = type(r.packet).__name__.upper() if r.data else "CLOSE"
            out.append((r.conn, r.direction, name))
        return out

    def to_text(self, with_time: bool = True) -> str:
        lines = []
        for r in self.records:
            fields = [f"{r.timestamp:.6f}"] if with_time else []
            fields += [r.conn, r.direction, r.data.hex()]
            lines.append("\t".join(fields))
        return "\n".join(lines) + "\n"


def harness_key(label: str) -> SigningKey:
    """Deterministic signing key for a named harness actor."""
    return SigningKey(hashlib.sha256(b"smoker-harness/" + label.encode()).digest())


def client_id_for(key: SigningKey) -> str:
    return derive_client_id(derive_public_key(key))


class Peer:
    """One scripted TCP connection to the broker."""

    def __init__(self, label: str, reader, writer, transcript: Transcript, timeout: float) -> None:
        self.label = label
        self.reader = reader
        self.writer = writer
        self.transcript = transcript
        self.timeout = timeout

    def send(self, packet: codec.Packet) -> None:
        self.send_raw(codec.encode_packet(packet))

    def send_raw(self, data: bytes) -> None:
        self.transcript.add(self.label, SENT, data)
        self.writer.write(data)

    async def recv(self) -> codec.Packet | None:
        try:
            got = await asyncio.wait_for(read_packet(self.reader), self.timeout)
        except asyncio.TimeoutError:
            raise ScriptTimeout(f"{self.label}: nothing received within {self.timeout}s") from None
        if got is None:
            self.transcript.add(self.label, CLOSED)
            return None
        self.transcript.add(self.label, RECEIVED, got[1])
        return got[0]

    async def expect(self, kind: type, **fields) -> codec.Packet:
        packet = await self.recv()
        if not isinstance(packet, kind):
            got = "connection close" if packet is None else packet
            raise ScenarioFailure(f"{self.label}: expected {kind.__name__}, got {got}")
        for name, want in fields.items():
            have = getattr(packet, name)
            if have != want:
                raise ScenarioFailure(f"{self.label}: {kind.__name__}.{name} = {have!r}, expected {want!r}")
        return packet

    async def expect_closed(self) -> None:
        packet = await self.recv()
        if packet is not None:
            raise ScenarioFailure(f"{self.label}: expected broker to close, got {packet}")

    async def drop(self) -> None:
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (OSError, ConnectionError):
            pass


@dataclass
class ScenarioContext:
    address: tuple[str, int]
    transcript: Transcript = field(default_factory=Transcript)
    timeout: float = 2.0
    registry_dump: Callable[[], str] | None = None
    peers: list[Peer] = field(default_factory=list)

    async def open(self, label: str) -> Peer:
        try:
            reader, writer = await asyncio.wait_for(asyncio.open_connection(*self.address), self.timeout)
        except (OSError, asyncio.TimeoutError) as exc:
            raise BrokerUnreachable(f"{self.address[0]}:{self.address[1]}: {exc}") from exc
        peer = Peer(label, reader, writer, self.transcript, self.timeout)
        self.peers.append(peer)
        return peer

    async def close_all(self) -> None:
        for peer in self.peers:
            await peer.drop()


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    script: Callable[[ScenarioContext], Awaitable[None]]
    expected_vulnerable: bool = False


@dataclass
class Verdict:
    scenario: str
    passed: bool
    transcript: Transcript
    detail: str = ""
    elapsed: float = 0.0

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        tail = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.scenario} [{self.elapsed * 1000:.0f} ms]{tail}"


# -- building blocks --------------------------------------------------------


def _connect(client_id: str, method: str | None = SMOKER) -> Connect:
    props = codec.auth_properties(method) if method else ()
    return Connect(client_id, keep_alive=0, properties=props)


def _proof(blob: bytes) -> Auth:
    return Auth(ReasonCode.CONTINUE_AUTHENTICATION, codec.auth_properties(SMOKER, blob))


async def _challenge(peer: Peer, client_id: str) -> bytes:
    peer.send(_connect(client_id))
    auth = await peer.expect(Auth, reason_code=ReasonCode.CONTINUE_AUTHENTICATION, auth_method=SMOKER)
    if len(auth.auth_data or b"") != NONCE_SIZE:
        raise ScenarioFailure(f"{peer.label}: challenge is not {NONCE_SIZE} bytes")
    return auth.auth_data


async def _authenticate(ctx: ScenarioContext, label: str, key: SigningKey) -> tuple[Peer, bytes, bytes]:
    peer = await ctx.open(label)
    nonce = await _challenge(peer, client_id_for(key))
    blob = sign(key, nonce)
    peer.send(_proof(blob))
    await peer.expect(Connack, reason_code=ReasonCode.SUCCESS)
    return peer, nonce, blob


async def _still_alive(peer: Peer) -> None:
    peer.send(Pingreq())
    await peer.expect(Pingresp)


async def _rejected(peer: Peer, reason: ReasonCode) -> None:
    await peer.expect(Connack, reason_code=reason)
    await peer.expect_closed()


def _garbage(label: str, n: int) -> bytes:
    out = b""
    while len(out) < n:
        out += hashlib.sha512(f"{label}/{len(out)}".encode()).digest()
    return out[:n]


# -- scenarios --------------------------------------------------------------

HONEST_FLOW = [
    ("victim", SENT, "CONNECT"),
    ("victim", RECEIVED, "AUTH"),
    ("victim", SENT, "AUTH"),
    ("victim", RECEIVED, "CONNACK"),
]


async def honest(ctx: ScenarioContext) -> None:
    await _authenticate(ctx, "victim", harness_key("victim"))
    if ctx.transcript.flow() != HONEST_FLOW:
        raise ScenarioFailure(f"message order {ctx.transcript.flow()}")


async def reconnect(ctx: ScenarioContext) -> None:
    key = harness_key("victim")
    first, nonce1, _ = await _authenticate(ctx, "victim", key)
    await first.drop()
    second, nonce2, _ = await _authenticate(ctx, "victim-again", key)
    if nonce1 == nonce2:
        raise ScenarioFailure("reconnect was challenged with the same nonce")
    await _still_alive(second)


async def unknown_method(ctx: ScenarioContext) -> None:
    peer = await ctx.open("client")
    peer.send(_connect(client_id_for(harness_key("victim")), method="UNKWN"))
    await _rejected(peer, ReasonCode.BAD_AUTHENTICATION_METHOD)


async def forged_signature(ctx: ScenarioContext) -> None:
    key = harness_key("victim")
    victim, _, _ = await _authenticate(ctx, "victim", key)
    thief = await ctx.open("adversary")
    nonce = await _challenge(thief, client_id_for(key))
    thief.send(_proof(_garbage("forged", 64) + nonce))
    await _rejected(thief, ReasonCode.NOT_AUTHORIZED)
    await _still_alive(victim)


async def stale_nonce_replay(ctx: ScenarioContext) -> None:
    key = harness_key("victim")
    victim, _, blob = await _authenticate(ctx, "victim", key)
    await victim.drop()
    thief = await ctx.open("adversary")
    await _challenge(thief, client_id_for(key))
    thief.send(_proof(blob))
    await _rejected(thief, ReasonCode.NOT_AUTHORIZED)


async def cross_connection_proof(ctx: ScenarioContext) -> None:
    key = harness_key("victim")
    cid = client_id_for(key)
    a = await ctx.open("conn-a")
    nonce_a = await _challenge(a, cid)
    b = await ctx.open("conn-b")
    await _challenge(b, cid)
    b.send(_proof(sign(key, nonce_a)))
    await _rejected(b, ReasonCode.NOT_AUTHORIZED)
    a.send(_proof(sign(key, nonce_a)))
    await a.expect(Connack, reason_code=ReasonCode.SUCCESS)


async def id_steal_unauthenticated(ctx: ScenarioContext) -> None:
    key = harness_key("victim")
    victim, _, _ = await _authenticate(ctx, "victim", key)
    thief = await ctx.open("adversary")
    thief.send(_connect(client_id_for(key), method=None))
    await _rejected(thief, ReasonCode.CLIENT_IDENTIFIER_NOT_VALID)
    await _still_alive(victim)


async def id_steal_evict(ctx: ScenarioContext) -> None:
    key = harness_key("victim")
    squatter = await ctx.open("squatter")
    squatter.send(_connect(client_id_for(key), method=None))
    await squatter.expect(Connack, reason_code=ReasonCode.SUCCESS)
    victim, _, _ = await _authenticate(ctx, "victim", key)
    await squatter.expect(Disconnect, reason_code=ReasonCode.IMPLEMENTATION_SPECIFIC_ERROR)
    await squatter.expect_closed()
    await _still_alive(victim)


async def passive_observer_then_impersonate(ctx: ScenarioContext) -> None:
    key = harness_key("victim")
    victim, _, _ = await _authenticate(ctx, "victim", key)
    # Everything on the wire and in broker memory is visible.
    captured = [r.packet for r in ctx.transcript.records if r.conn == "victim" and r.direction == SENT]
    connect = next(p for p in captured if isinstance(p, Connect))
    proof = next(p for p in captured if isinstance(p, Auth)).auth_data
    if ctx.registry_dump is not None:
        for line in ctx.registry_dump().splitlines():
            if len(line.split("\t")) != 3:
                raise ScenarioFailure(f"registry exposes more than clientID/flag/count: {line!r}")
    thief = await ctx.open("adversary")
    await _challenge(thief, connect.client_id)
    thief.send(_proof(proof))
    await _rejected(thief, ReasonCode.NOT_AUTHORIZED)
    squatter = await ctx.open("adversary-default")
    squatter.send(_connect(connect.client_id, method=None))
    await _rejected(squatter, ReasonCode.CLIENT_IDENTIFIER_NOT_VALID)
    await _still_alive(victim)


async def protocol_order_violation(ctx: ScenarioContext) -> None:
    early = await ctx.open("auth-first")
    early.send(_proof(_garbage("early", 96)))
    await early.expect(Disconnect, reason_code=ReasonCode.IMPLEMENTATION_SPECIFIC_ERROR)
    await early.expect_closed()

    pending = await ctx.open("publish-while-pending")
    await _challenge(pending, client_id_for(harness_key("victim")))
    pending.send(Publish("t", b"too early"))
    await pending.expect(Disconnect, reason_code=ReasonCode.IMPLEMENTATION_SPECIFIC_ERROR)
    await pending.expect_closed()

    twice, _, _ = await _authenticate(ctx, "connect-twice", harness_key("victim"))
    twice.send(_connect(client_id_for(harness_key("victim"))))
    await twice.expect(Disconnect, reason_code=ReasonCode.IMPLEMENTATION_SPECIFIC_ERROR)
    await twice.expect_closed()


async def invalid_client_id(ctx: ScenarioContext) -> None:
    for label, cid in [("short-id", "short"), ("bad-alphabet", "-" * 43), ("overflow", "z" * 43)]:
        peer = await ctx.open(label)
        peer.send(_connect(cid))
        await _rejected(peer, ReasonCode.CLIENT_IDENTIFIER_NOT_VALID)


async def pubsub(ctx: ScenarioContext) -> None:
    sub, _, _ = await _authenticate(ctx, "subscriber", harness_key("subscriber"))
    sub.send(Subscribe(1, (("sensors/t", 0),)))
    await sub.expect(Suback, packet_id=1, reason_codes=(0,))
    pub, _, _ = await _authenticate(ctx, "publisher", harness_key("publisher"))
    pub.send(Publish("sensors/t", b"21.5"))
    await sub.expect(Publish, topic="sensors/t", payload=b"21.5")


async def mitm_relay(ctx: ScenarioContext) -> None:
    """An active relay between victim and broker ends up owning the session.

    Demonstrates the known limit of the scheme: without broker identity the
    proof can be relayed.  Passes when the attack succeeds.
    """
    observer, _, _ = await _authenticate(ctx, "observer", harness_key("observer"))
    observer.send(Subscribe(1, (("mitm/demo", 0),)))
    await observer.expect(Suback, packet_id=1)

    relayed = asyncio.Event()
    victim_connected = asyncio.get_running_loop().create_future()

    async def relay(v_reader, v_writer):
        upstream = await ctx.open("mitm-upstream")
        for _ in range(2):  # CONNECT, then AUTH(s || m)
            got = await read_packet(v_reader)
            if got is None:
                return
            upstream.send_raw(got[1])
            reply = await upstream.recv()
            if reply is None:
                return
            v_writer.write(codec.encode_packet(reply))
            if isinstance(reply, Connack):
                break
        relayed.set()
        upstream.send(Publish("mitm/demo", b"injected by relay"))
        await victim_connected
        v_writer.close()

    server = await asyncio.start_server(relay, "127.0.0.1", 0)
    port = server.sockets[0].getsockname()[1]
    try:
        victim = Client(harness_key("victim"), "127.0.0.1", port, keep_alive=0, timeout=ctx.timeout)
        await victim.connect()
        victim_connected.set_result(True)
        await asyncio.wait_for(relayed.wait(), ctx.timeout)
        await observer.expect(Publish, topic="mitm/demo", payload=b"injected by relay")
        await victim.close()
    finally:
        server.close()
        await server.wait_closed()


_BUILTINS = [
    Scenario("honest", "CONNECT, AUTH challenge, signed AUTH, CONNACK success", honest),
    Scenario("reconnect", "a second session repeats the handshake with a new nonce", reconnect),
    Scenario("unknown-method", "unsupported method gets CONNACK 0x8C and a close", unknown_method),
    Scenario("forged-signature", "garbage signature over the fresh nonce is refused", forged_signature),
    Scenario("stale-nonce-replay", "proof for an old nonce is refused", stale_nonce_replay),
    Scenario("cross-connection-proof", "proof for connection A is refused on connection B", cross_connection_proof),
    Scenario("id-steal-unauthenticated", "unauthenticated claim on a live authenticated id", id_steal_unauthenticated),
    Scenario("id-steal-evict", "authenticated owner evicts an unauthenticated squatter", id_steal_evict),
    Scenario(
        "passive-observer-then-impersonate",
        "observer with a full view of wire and broker memory replays the handshake",
        passive_observer_then_impersonate,
    ),
    Scenario("protocol-order-violation", "out-of-order packets get DISCONNECT 0x83", protocol_order_violation),
    Scenario("invalid-client-id", "non-key clientIDs under SMOKER get CONNACK 0x85", invalid_client_id),
    Scenario("pubsub", "authenticated sessions exchange messages", pubsub),
    Scenario("mitm-relay", "EXPECTED-VULNERABLE: relay without broker identity", mitm_relay, expected_vulnerable=True),
]


def builtin_scenarios() -> list[Scenario]:
    return list(_BUILTINS)


def get_scenario(name: str) -> Scenario:
    for s in _BUILTINS:
        if s.name == name:
            return s
    raise KeyError(name)


async def run_scenario_async(
    scenario: Scenario,
    address: tuple[str, int],
    *,
    timeout: float = 2.0,
    registry_dump: Callable[[], str] | None = None,
) -> Verdict:
    ctx = ScenarioContext(address, timeout=timeout, registry_dump=registry_dump)
    start = time.perf_counter()
    try:
        await scenario.script(ctx)
    except BrokerUnreachable:
        raise
    except ScenarioFailure as exc:
        passed, detail = False, str(exc)
    except (codec.DecodeError, ConnectionError) as exc:
        passed, detail = False, f"{type(exc).__name__}: {exc}"
    else:
        passed, detail = True, ""
    finally:
        await ctx.close_all()
    return Verdict(scenario.name, passed, ctx.transcript, detail, time.perf_counter() - start)


def run_scenario(scenario: Scenario | str, address: tuple[str, int], **kwargs) -> Verdict:
    if isinstance(scenario, str):
        scenario = get_scenario(scenario)
    return asyncio.run(run_scenario_async(scenario, address, **kwargs))


def run_scenarios(
    address: tuple[str, int],
    names: Iterable[str] | None = None,
    transcript_dir: str | Path | None = None,
    **kwargs,
) -> list[Verdict]:
    selected = [get_scenario(n) for n in names] if names else builtin_scenarios()
    verdicts = [run_scenario(s, address, **kwargs) for s in selected]
    if transcript_dir is not None:
        out = Path(transcript_dir)
        out.mkdir(parents=True, exist_ok=True)
        for v in verdicts:
            (out / f"{v.scenario}.hex").write_text(v.transcript.to_text())
    return verdicts
