"""Randomised interleaving checker for the broker core.

Drives a :class:`Broker` through fake transports with a random schedule of
honest clients, replayers, forgers and unauthenticated squatters, and checks
the session invariants after every step.  Ground truth (who answered which
nonce with what) is tracked here, independently of the broker.
"""

import hashlib
import random
from dataclasses import dataclass, field

from smoker import codec
from smoker.broker import Broker, ConnState
from smoker.codec import Auth, Connect, Disconnect, Publish, Subscribe
from smoker.identity import derive_client_id
from smoker.nonce import NonceService
from smoker.sigscheme import SigningKey, derive_public_key, sign


class FakeTransport:
    def __init__(self):
        self.out = bytearray()
        self.closed = False

    def write(self, data):
        assert not self.closed, "write after close"
        self.out += data

    def close(self):
        self.closed = True

    def packets(self):
        buf, found = bytes(self.out), []
        while buf:
            packet, used = codec.try_decode(buf)
            found.append(packet)
            buf = buf[used:]
        return found


class FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


@dataclass
class Actor:
    name: str
    key: SigningKey
    client_id: str
    observed: list = field(default_factory=list)  # proofs this actor has seen on the wire


@dataclass
class Link:
    actor: Actor
    claimed: str
    transport: FakeTransport
    conn: object
    smoker: bool
    nonce: bytes | None = None
    answered_with: bytes | None = None
    genuine: bool = False  # owner signed exactly this connection's nonce


def make_actor(name: str) -> Actor:
    key = SigningKey(hashlib.sha256(b"model/" + name.encode()).digest())
    return Actor(name, key, derive_client_id(derive_public_key(key)))


class Model:
    def __init__(self, seed: int, broker: Broker | None = None):
        self.rng = random.Random(seed)
        self.clock = FakeClock()
        self.broker = broker or Broker(NonceService(seed.to_bytes(32, "big")), auth_timeout=5.0, clock=self.clock)
        self.broker.clock = self.clock
        self.actors = [make_actor(n) for n in ("alice", "bob", "eve")]
        self.links: list[Link] = []
        self.issued: list[bytes] = []
        self.violations: list[str] = []
        self.wire: list[bytes] = []  # every proof any link has sent

    # -- actions -----------------------------------------------------------

    def open(self):
        actor = self.rng.choice(self.actors)
        roll = self.rng.random()
        if roll < 0.6:
            claimed, smoker = actor.client_id, True
        elif roll < 0.8:
            claimed, smoker = self.rng.choice(self.actors).client_id, True
        else:
            claimed, smoker = self.rng.choice(self.actors).client_id, False
        t = FakeTransport()
        conn = self.broker.connection_made(t, f"{actor.name}#{len(self.links)}")
        link = Link(actor, claimed, t, conn, smoker)
        self.links.append(link)
        props = codec.auth_properties("SMOKER") if smoker else ()
        self._feed(link, Connect(claimed, 0, properties=props))
        for p in t.packets():
            if isinstance(p, Auth):
                link.nonce = p.auth_data
                self.issued.append(p.auth_data)

    def answer(self):
        pending = [l for l in self.links if l.nonce is not None and l.answered_with is None and l.conn.live]
        if not pending:
            return
        link = self.rng.choice(pending)
        roll = self.rng.random()
        owner = link.actor.client_id == link.claimed
        if roll < 0.5 and owner:
            blob = sign(link.actor.key, link.nonce)
            link.genuine = True
        elif roll < 0.75 and self.wire:
            blob = self.rng.choice(self.wire)
        elif roll < 0.9:
            blob = sign(link.actor.key, link.nonce)  # signed, but maybe not by the ID owner
            link.genuine = owner
        else:
            blob = self.rng.randbytes(self.rng.choice([0, 10, 96]))
        link.answered_with = blob
        self.wire.append(blob)
        self._feed(link, Auth(0x18, codec.auth_properties("SMOKER", blob)))

    def chatter(self):
        live = [l for l in self.links if l.conn.live]
        if not live:
            return
        link = self.rng.choice(live)
        packet = self.rng.choice([Subscribe(1, (("t", 0),)), Publish("t", b"x"), Disconnect(), Connect("x")])
        self._feed(link, packet)

    def drop(self):
        live = [l for l in self.links if l.conn.live]
        if live:
            link = self.rng.choice(live)
            link.transport.closed = True  # peer hung up
            self.broker.connection_lost(link.conn)

    def tick(self):
        self.clock.now += self.rng.choice([0.5, 1.0, 6.0])
        self.broker.expire()

    def _feed(self, link, packet):
        raw = codec.encode_packet(packet)
        cut = self.rng.randrange(len(raw) + 1)
        self.broker.data_received(link.conn, raw[:cut])
        self.broker.data_received(link.conn, raw[cut:])

    # -- invariants --------------------------------------------------------

    def check(self, step):
        by_conn = {id(l.conn): l for l in self.links}
        live_ids = {}
        for cid, record in self.broker.registry.items():
            conn = record.connection
            if conn is None or not conn.live:
                self.violations.append(f"{step}: registry entry {cid[:8]} points at a dead connection")
                continue
            link = by_conn[id(conn)]
            if record.authenticated and not link.genuine:
                self.violations.append(f"{step}: {link.actor.name} holds authenticated {cid[:8]} without a fresh proof")
            if record.authenticated and conn.state is not ConnState.AUTHENTICATED:
                self.violations.append(f"{step}: state mismatch for {cid[:8]}")
            live_ids.setdefault(cid, []).append(conn)
        for link in self.links:
            if link.conn.state in (ConnState.AUTHENTICATED, ConnState.ADMITTED) and link.conn.live:
                record = self.broker.registry.get(link.conn.client_id)
                if record is None or record.connection is not link.conn:
                    self.violations.append(f"{step}: live session {link.actor.name} missing from registry")
            if link.conn.live == link.transport.closed:
                self.violations.append(f"{step}: liveness disagrees with transport for {link.actor.name}")
        if len(set(self.issued)) != len(self.issued):
            self.violations.append(f"{step}: nonce reused")

    def run(self, steps=60):
        actions = [self.open, self.open, self.answer, self.answer, self.answer, self.chatter, self.drop, self.tick]
        for step in range(steps):
            self.rng.choice(actions)()
            self.check(step)
        return self.violations


def run_interleavings(seeds, *, compare_nonce=True, steps=60):
    """Return ``{seed: violations}`` for every seed that broke an invariant."""
    failures = {}
    for seed in seeds:
        model = Model(seed)
        model.broker.compare_nonce = compare_nonce
        violations = model.run(steps)
        if violations:
            failures[seed] = violations
    return failures
