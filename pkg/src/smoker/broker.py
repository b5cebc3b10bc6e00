"""MQTT 5.0 subset broker with SMOKER challenge-response authentication.

The :class:`Broker` core is transport agnostic: it is fed raw bytes per
connection and writes encoded packets back through any object with
``write(bytes)`` and ``close()``.  :func:`serve` binds it to an asyncio TCP
server; :class:`BackgroundBroker` runs that server on a private thread.

Session flow under the SMOKER method::

    CONNECT(clientID, method=SMOKER)  ->  AUTH(0x18, nonce)
    AUTH(0x18, signature || nonce)    ->  CONNACK(0x00) or CONNACK(0x87)

The clientID is the base62 public key, so the broker keeps no secrets: its
registry holds clientIDs, an authenticated flag and subscriptions only.
"""

from __future__ import annotations

import asyncio
import enum
import hmac
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

from . import codec
from .codec import (
    Auth,
    Connack,
    Connect,
    Disconnect,
    Pingreq,
    Pingresp,
    Prop,
    Publish,
    ReasonCode,
    Suback,
    Subscribe,
    auth_properties,
)
from .identity import InvalidClientId, decode_client_id
from .nonce import NonceService
from .sigscheme import MalformedBlob, VerifyingKey, verify

log = logging.getLogger(__name__)

SMOKER = "SMOKER"
DEFAULT_PORT = 1883
DEFAULT_AUTH_TIMEOUT = 10.0
DEFAULT_MAX_PACKET = 1 << 20

# Properties that are per-hop and not forwarded to subscribers.
_HOP_PROPERTIES = {Prop.TOPIC_ALIAS, Prop.SUBSCRIPTION_IDENTIFIER}


class Transport(Protocol):
    def write(self, data: bytes) -> None: ...

    def close(self) -> None: ...


class ConnState(enum.Enum):
    AWAITING_CONNECT = "awaiting-connect"
    CHALLENGE_SENT = "challenge-sent"
    AUTHENTICATED = "authenticated"
    ADMITTED = "admitted"  # default path, no proof given
    CLOSED = "closed"


class Resolution(enum.Enum):
    ADMIT = "admit"
    REJECT_NEWCOMER = "reject-newcomer"
    EVICT_INCUMBENT = "evict-incumbent"


class Connection:
    """Broker-side state of one network connection."""

    def __init__(self, transport: Transport, peer: object = None) -> None:
        self.transport = transport
        self.peer = peer
        self.state = ConnState.AWAITING_CONNECT
        self.client_id: str | None = None
        self.public_key: VerifyingKey | None = None
        self.nonce: bytes | None = None
        self.deadline: float | None = None
        self.keep_alive = 0
        self.timer = None
        self._buffer = bytearray()

    @property
    def live(self) -> bool:
        return self.state is not ConnState.CLOSED

    def send(self, packet: codec.Packet) -> None:
        if self.live:
            self.transport.write(codec.encode_packet(packet))

    def __repr__(self) -> str:
        return f"<Connection {self.peer} {self.state.value} {self.client_id}>"


@dataclass(eq=False)
class SessionRecord:
    client_id: str
    authenticated: bool
    connection: Connection | None
    subscriptions: set[str] = field(default_factory=set)


def resolve_clientid_conflict(
    registry: dict[str, SessionRecord], client_id: str, newcomer_authenticated: bool
) -> Resolution:
    """Arbitrate between a newcomer and the live holder of ``client_id``.

    An authenticated holder can only be displaced by another authenticated
    connection; anyone may displace an unauthenticated holder.
    """
    incumbent = registry.get(client_id)
    if incumbent is None or incumbent.connection is None or not incumbent.connection.live:
        return Resolution.ADMIT
    if incumbent.authenticated and not newcomer_authenticated:
        return Resolution.REJECT_NEWCOMER
    return Resolution.EVICT_INCUMBENT


class Broker:
    """Per-connection SMOKER state machines over a shared session registry.

    All entry points take one lock, so registry updates and conflict
    arbitration are totally ordered even if called from several threads.
    """

    def __init__(
        self,
        nonces: NonceService | None = None,
        *,
        auth_timeout: float = DEFAULT_AUTH_TIMEOUT,
        max_packet_size: int = DEFAULT_MAX_PACKET,
        clock: Callable[[], float] = time.monotonic,
        call_later: Callable | None = None,
        compare_nonce: bool = True,
    ) -> None:
        self.nonces = nonces or NonceService()
        self.auth_timeout = auth_timeout
        self.max_packet_size = max_packet_size
        self.clock = clock
        self.call_later = call_later
        # Turning this off is a deliberately broken build for mutation tests.
        self.compare_nonce = compare_nonce
        self.registry: dict[str, SessionRecord] = {}
        self.connections: set[Connection] = set()
        self._lock = threading.RLock()

    # -- transport events --------------------------------------------------

    def connection_made(self, transport: Transport, peer: object = None) -> Connection:
        conn = Connection(transport, peer)
        with self._lock:
            self.connections.add(conn)
        log.debug("connection from %s", peer)
        return conn

    def data_received(self, conn: Connection, data: bytes) -> None:
        with self._lock:
            if not conn.live:
                return
            conn._buffer += data
            while conn.live:
                try:
                    decoded = codec.try_decode(conn._buffer, self.max_packet_size)
                except codec.CodecError as exc:
                    log.info("%s: undecodable input: %s", conn.peer, exc)
                    self._violation(conn, str(exc))
                    return
                if decoded is None:
                    return
                packet, used = decoded
                del conn._buffer[:used]
                self.packet_received(conn, packet)

    def connection_lost(self, conn: Connection) -> None:
        with self._lock:
            self._forget(conn)

    def expire(self, now: float | None = None) -> None:
        """Close connections whose challenge has gone unanswered too long."""
        now = self.clock() if now is None else now
        with self._lock:
            for conn in list(self.connections):
                if conn.state is ConnState.CHALLENGE_SENT and conn.deadline is not None and conn.deadline <= now:
                    log.info("%s: authentication deadline passed", conn.peer)
                    self._violation(conn, "authentication timeout")

    def _auth_expired(self, conn: Connection) -> None:
        with self._lock:
            if conn.state is ConnState.CHALLENGE_SENT:
                log.info("%s: authentication deadline passed", conn.peer)
                self._violation(conn, "authentication timeout")

    def keep_alive_expired(self, conn: Connection) -> None:
        with self._lock:
            if conn.live:
                log.info("%s: keep-alive expired", conn.peer)
                self._close(conn)

    # -- packet dispatch ---------------------------------------------------

    def packet_received(self, conn: Connection, packet: codec.Packet) -> None:
        with self._lock:
            if not conn.live:
                return
            if isinstance(packet, Connect):
                self.handle_connect(conn, packet)
            elif conn.state is ConnState.AWAITING_CONNECT:
                self._violation(conn, "first packet was not CONNECT")
            elif isinstance(packet, Auth):
                self.handle_auth_response(conn, packet)
            elif conn.state is ConnState.CHALLENGE_SENT:
                self._violation(conn, f"{type(packet).__name__} before authentication completed")
            elif isinstance(packet, Publish):
                self.route_publish(conn, packet)
            elif isinstance(packet, Subscribe):
                self.handle_subscribe(conn, packet)
            elif isinstance(packet, Pingreq):
                conn.send(Pingresp())
            elif isinstance(packet, Disconnect):
                self._close(conn)
            else:
                self._violation(conn, f"unexpected {type(packet).__name__} from client")

    def handle_connect(self, conn: Connection, pkt: Connect) -> None:
        if conn.state is not ConnState.AWAITING_CONNECT:
            self._violation(conn, "second CONNECT on one connection")
            return
        conn.keep_alive = pkt.keep_alive
        method = pkt.auth_method
        if method is None:
            self._connect_default(conn, pkt)
        elif method != SMOKER:
            log.info("%s: unsupported authentication method %r", conn.peer, method)
            self._refuse(conn, ReasonCode.BAD_AUTHENTICATION_METHOD)
        else:
            try:
                pk = decode_client_id(pkt.client_id)
            except InvalidClientId as exc:
                log.info("%s: invalid SMOKER clientID: %s", conn.peer, exc)
                self._refuse(conn, ReasonCode.CLIENT_IDENTIFIER_NOT_VALID)
                return
            conn.client_id = pkt.client_id
            conn.public_key = pk
            conn.nonce = self.nonces.next_nonce()
            conn.state = ConnState.CHALLENGE_SENT
            conn.deadline = self.clock() + self.auth_timeout
            if self.call_later is not None:
                conn.timer = self.call_later(self.auth_timeout, self._auth_expired, conn)
            conn.send(Auth(ReasonCode.CONTINUE_AUTHENTICATION, auth_properties(SMOKER, conn.nonce)))

    def _connect_default(self, conn: Connection, pkt: Connect) -> None:
        if not pkt.client_id:
            # Server-assigned clientIDs are not supported.
            self._refuse(conn, ReasonCode.CLIENT_IDENTIFIER_NOT_VALID)
            return
        if resolve_clientid_conflict(self.registry, pkt.client_id, False) is Resolution.REJECT_NEWCOMER:
            log.warning("%s: refused unauthenticated claim on %s", conn.peer, pkt.client_id)
            self._refuse(conn, ReasonCode.CLIENT_IDENTIFIER_NOT_VALID)
            return
        self._admit(conn, pkt.client_id, authenticated=False)
        conn.send(Connack(ReasonCode.SUCCESS))

    def handle_auth_response(self, conn: Connection, pkt: Auth) -> None:
        if conn.state is not ConnState.CHALLENGE_SENT:
            self._violation(conn, "AUTH outside a pending challenge")
            return
        if pkt.auth_method != SMOKER or pkt.reason_code != ReasonCode.CONTINUE_AUTHENTICATION:
            self._violation(conn, "AUTH with wrong method or reason code")
            return
        nonce, conn.nonce = conn.nonce, None
        blob = pkt.auth_data or b""
        try:
            signed = verify(conn.public_key, blob)
        except MalformedBlob:
            signed = None
        if signed is None:
            ok = False
        elif self.compare_nonce:
            ok = hmac.compare_digest(signed, nonce)
        else:
            ok = True
        if not ok:
            log.warning("%s: proof rejected for %s", conn.peer, conn.client_id)
            self._refuse(conn, ReasonCode.NOT_AUTHORIZED)
            return
        # An authenticated newcomer is never rejected, only admitted.
        self._admit(conn, conn.client_id, authenticated=True)
        self.nonces.reseed(blob)
        conn.send(Connack(ReasonCode.SUCCESS, properties=auth_properties(SMOKER)))
        log.info("%s: authenticated %s", conn.peer, conn.client_id)

    def handle_subscribe(self, conn: Connection, pkt: Subscribe) -> None:
        record = self.registry[conn.client_id]
        record.subscriptions.update(topic for topic, _ in pkt.topics)
        conn.send(Suback(pkt.packet_id, tuple(ReasonCode.SUCCESS for _ in pkt.topics)))

    def route_publish(self, conn: Connection, pkt: Publish) -> list[str]:
        """Deliver to every live session subscribed to exactly ``pkt.topic``."""
        with self._lock:
            if conn.state not in (ConnState.AUTHENTICATED, ConnState.ADMITTED):
                self._violation(conn, "PUBLISH before authentication")
                return []
            props = tuple((pid, v) for pid, v in pkt.properties if pid not in _HOP_PROPERTIES)
            out = Publish(pkt.topic, pkt.payload, properties=props)
            delivered = []
            for record in self.registry.values():
                target = record.connection
                if target is not None and target.live and pkt.topic in record.subscriptions:
                    target.send(out)
                    delivered.append(record.client_id)
            return delivered

    # -- registry ----------------------------------------------------------

    def _admit(self, conn: Connection, client_id: str, authenticated: bool) -> None:
        resolution = resolve_clientid_conflict(self.registry, client_id, authenticated)
        if resolution is Resolution.EVICT_INCUMBENT:
            incumbent = self.registry[client_id].connection
            log.info("%s: evicting %s holder %s", conn.peer, client_id, incumbent.peer)
            incumbent.send(Disconnect(ReasonCode.IMPLEMENTATION_SPECIFIC_ERROR))
            self._close(incumbent)
        conn.client_id = client_id
        conn.state = ConnState.AUTHENTICATED if authenticated else ConnState.ADMITTED
        conn.deadline = None
        self._cancel_timer(conn)
        self.registry[client_id] = SessionRecord(client_id, authenticated, conn)

    def _forget(self, conn: Connection) -> None:
        conn.state = ConnState.CLOSED
        self._cancel_timer(conn)
        self.connections.discard(conn)
        record = self.registry.get(conn.client_id) if conn.client_id else None
        if record is not None and record.connection is conn:
            del self.registry[conn.client_id]

    def _cancel_timer(self, conn: Connection) -> None:
        if conn.timer is not None:
            conn.timer.cancel()
            conn.timer = None

    def _close(self, conn: Connection) -> None:
        if conn.live:
            self._forget(conn)
            conn.transport.close()

    def _refuse(self, conn: Connection, reason: ReasonCode) -> None:
        conn.send(Connack(reason))
        self._close(conn)

    def _violation(self, conn: Connection, why: str) -> None:
        log.info("%s: protocol violation: %s", conn.peer, why)
        conn.send(Disconnect(ReasonCode.IMPLEMENTATION_SPECIFIC_ERROR))
        self._close(conn)

    def dump(self) -> str:
        """Registry as ``clientID<TAB>authenticated<TAB>n_subscriptions`` lines."""
        with self._lock:
            rows = sorted(self.registry.values(), key=lambda r: r.client_id)
            return "".join(
                f"{r.client_id}\t{'true' if r.authenticated else 'false'}\t{len(r.subscriptions)}\n" for r in rows
            )


# -- asyncio transport ------------------------------------------------------


class _BrokerProtocol(asyncio.Protocol):
    def __init__(self, broker: Broker) -> None:
        self.broker = broker
        self.conn: Connection | None = None
        self._keep_alive = None

    def connection_made(self, transport):
        self.transport = transport
        self.conn = self.broker.connection_made(transport, transport.get_extra_info("peername"))

    def data_received(self, data):
        self.broker.data_received(self.conn, data)
        self._rearm()

    def connection_lost(self, exc):
        if self._keep_alive is not None:
            self._keep_alive.cancel()
        self.broker.connection_lost(self.conn)

    def _rearm(self):
        if self._keep_alive is not None:
            self._keep_alive.cancel()
            self._keep_alive = None
        if self.conn.live and self.conn.keep_alive:
            loop = asyncio.get_running_loop()
            self._keep_alive = loop.call_later(1.5 * self.conn.keep_alive, self.broker.keep_alive_expired, self.conn)


async def serve(broker: Broker, host: str = "127.0.0.1", port: int = DEFAULT_PORT) -> asyncio.AbstractServer:
    loop = asyncio.get_running_loop()
    broker.call_later = loop.call_later
    return await loop.create_server(lambda: _BrokerProtocol(broker), host, port)


class BackgroundBroker:
    """Run a broker on its own event loop thread; handy for tests and demos."""

    def __init__(self, broker: Broker | None = None, host: str = "127.0.0.1", port: int = 0) -> None:
        self.broker = broker or Broker()
        self.host = host
        self.port = port
        self._loop: asyncio.AbstractEventLoop | None = None
        self._server = None
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.host, self.port

    def start(self) -> BackgroundBroker:
        ready = threading.Event()
        failure: list[BaseException] = []

        def run() -> None:
            loop = asyncio.new_event_loop()
            self._loop = loop
            try:
                self._server = loop.run_until_complete(serve(self.broker, self.host, self.port))
            except BaseException as exc:  # surfaced in start()
                failure.append(exc)
                ready.set()
                loop.close()
                return
            self.port = self._server.sockets[0].getsockname()[1]
            ready.set()
            loop.run_forever()
            self._server.close()
            loop.run_until_complete(self._server.wait_closed())
            loop.close()

        self._thread = threading.Thread(target=run, name="smoker-broker", daemon=True)
        self._thread.start()
        ready.wait()
        if failure:
            raise failure[0]
        return self

    def stop(self) -> None:
        if self._loop is not None and self._thread is not None:
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join(timeout=5)
            self._thread = None

    def __enter__(self) -> BackgroundBroker:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
