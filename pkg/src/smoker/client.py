"""Asyncio MQTT client that authenticates with the SMOKER method.

The clientID is derived from the signing key once, when the client is
built, and cached.  Every connection, including reconnects, then costs a
single signature over the broker's fresh nonce.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import AsyncIterator

from . import codec
from .codec import Auth, Connack, Connect, Disconnect, Pingreq, Pingresp, Publish, ReasonCode, Suback, Subscribe
from .identity import derive_client_id
from .nonce import NONCE_SIZE
from .sigscheme import SigningKey, derive_public_key, load_key, sign

log = logging.getLogger(__name__)

SMOKER = "SMOKER"


class ClientError(Exception):
    """Session could not be established or was lost."""


class BadMethod(ClientError):
    pass


class NotAuthorized(ClientError):
    pass


class IdRejected(ClientError):
    pass


class AuthTimeout(ClientError):
    pass


class MalformedChallenge(ClientError):
    pass


class ProtocolError(ClientError):
    pass


class TransportError(ClientError):
    pass


_CONNACK_ERRORS = {
    ReasonCode.BAD_AUTHENTICATION_METHOD: BadMethod,
    ReasonCode.NOT_AUTHORIZED: NotAuthorized,
    ReasonCode.CLIENT_IDENTIFIER_NOT_VALID: IdRejected,
}


def parse_address(text: str, default_port: int = 1883) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        return text, default_port
    return host.strip("[]") or "127.0.0.1", int(port)


async def read_packet(reader: asyncio.StreamReader) -> tuple[codec.Packet, bytes] | None:
    """Read one packet; returns ``(packet, raw_bytes)`` or ``None`` at EOF."""
    try:
        raw = bytearray(await reader.readexactly(1))
        for _ in range(4):
            raw += await reader.readexactly(1)
            if not raw[-1] & 0x80:
                break
        _, _, length, _ = codec.parse_fixed_header(bytes(raw))
        raw += await reader.readexactly(length)
    except asyncio.IncompleteReadError:
        return None
    except ConnectionError:
        return None
    return codec.decode_packet(bytes(raw)), bytes(raw)


@dataclass
class ClientConfig:
    broker: str
    key_path: Path
    keep_alive: int = 60
    client_id: str | None = None  # test hook: claim a clientID other than our own
    method: str = SMOKER  # test hook
    timeout: float = 5.0


class Client:
    def __init__(
        self,
        signing_key: SigningKey,
        host: str = "127.0.0.1",
        port: int = 1883,
        *,
        keep_alive: int = 60,
        client_id: str | None = None,
        method: str = SMOKER,
        timeout: float = 5.0,
    ) -> None:
        self.signing_key = signing_key
        self.host = host
        self.port = port
        self.keep_alive = keep_alive
        self.method = method
        self.timeout = timeout
        self.client_id = client_id or derive_client_id(derive_public_key(signing_key))
        self.nonces: list[bytes] = []
        self.last_proof: bytes | None = None
        self.disconnect_reason: int | None = None
        self._reader: asyncio.StreamReader | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._tasks: list[asyncio.Task] = []
        self._inbox: asyncio.Queue = asyncio.Queue()
        self._pending: dict[int, asyncio.Future] = {}
        self._pongs: list[asyncio.Future] = []
        self._next_id = 0

    @classmethod
    def from_config(cls, cfg: ClientConfig) -> Client:
        host, port = parse_address(cfg.broker)
        return cls(
            load_key(cfg.key_path),
            host,
            port,
            keep_alive=cfg.keep_alive,
            client_id=cfg.client_id,
            method=cfg.method,
            timeout=cfg.timeout,
        )

    @property
    def connected(self) -> bool:
        return self._writer is not None and not self._writer.is_closing()

    async def connect(self, *, proof_override: bytes | None = None) -> Client:
        """Open a connection and run the challenge-response handshake.

        ``proof_override`` replaces the signature blob sent to the broker;
        it exists so tests can replay a stale proof.
        """
        try:
            self._reader, self._writer = await asyncio.wait_for(
                asyncio.open_connection(self.host, self.port), self.timeout
            )
        except (OSError, asyncio.TimeoutError) as exc:
            raise TransportError(f"cannot reach {self.host}:{self.port}: {exc}") from exc
        self.disconnect_reason = None
        self._inbox = asyncio.Queue()
        try:
            await self._handshake(proof_override)
        except BaseException:
            await self.close()
            raise
        self._tasks = [asyncio.create_task(self._read_loop())]
        if self.keep_alive:
            self._tasks.append(asyncio.create_task(self._ping_loop()))
        return self

    async def _handshake(self, proof_override: bytes | None) -> None:
        props = codec.auth_properties(self.method) if self.method else ()
        self._send(Connect(self.client_id, self.keep_alive, properties=props))
        packet = await self._expect()
        if isinstance(packet, Auth):
            if packet.reason_code != ReasonCode.CONTINUE_AUTHENTICATION or packet.auth_method != self.method:
                raise ProtocolError(f"unexpected AUTH {packet}")
            nonce = packet.auth_data or b""
            if len(nonce) != NONCE_SIZE:
                raise MalformedChallenge(f"challenge is {len(nonce)} bytes, expected {NONCE_SIZE}")
            self.nonces.append(nonce)
            blob = proof_override if proof_override is not None else sign(self.signing_key, nonce)
            self.last_proof = blob
            self._send(Auth(ReasonCode.CONTINUE_AUTHENTICATION, codec.auth_properties(self.method, blob)))
            packet = await self._expect()
        if isinstance(packet, Disconnect):
            self.disconnect_reason = packet.reason_code
            raise ProtocolError(f"broker disconnected with reason {packet.reason_code:#04x}")
        if not isinstance(packet, Connack):
            raise ProtocolError(f"expected CONNACK, got {type(packet).__name__}")
        if packet.reason_code != ReasonCode.SUCCESS:
            error = _CONNACK_ERRORS.get(packet.reason_code, ProtocolError)
            raise error(f"CONNACK reason {packet.reason_code:#04x}")
        log.info("session established as %s", self.client_id)

    async def _expect(self) -> codec.Packet:
        try:
            got = await asyncio.wait_for(read_packet(self._reader), self.timeout)
        except asyncio.TimeoutError:
            raise AuthTimeout("no reply from broker") from None
        except codec.DecodeError as exc:
            raise ProtocolError(f"undecodable reply: {exc}") from exc
        if got is None:
            raise TransportError("broker closed the connection")
        return got[0]

    async def reconnect(self, **kwargs) -> Client:
        """Drop the current connection and authenticate from scratch."""
        await self.close()
        return await self.connect(**kwargs)

    def _send(self, packet: codec.Packet) -> None:
        if self._writer is None or self._writer.is_closing():
            raise TransportError("not connected")
        self._writer.write(codec.encode_packet(packet))

    async def publish(self, topic: str, payload: bytes | str) -> None:
        if isinstance(payload, str):
            payload = payload.encode()
        self._send(Publish(topic, payload))
        await self._writer.drain()

    async def subscribe(self, *topics: str) -> Suback:
        self._next_id = self._next_id % 0xFFFF + 1
        fut = asyncio.get_running_loop().create_future()
        self._pending[self._next_id] = fut
        self._send(Subscribe(self._next_id, tuple((t, 0) for t in topics)))
        return await asyncio.wait_for(fut, self.timeout)

    async def ping(self) -> None:
        fut = asyncio.get_running_loop().create_future()
        self._pongs.append(fut)
        self._send(Pingreq())
        await asyncio.wait_for(fut, self.timeout)

    async def messages(self) -> AsyncIterator[Publish]:
        """Yield incoming PUBLISH packets until the connection closes."""
        while True:
            msg = await self._inbox.get()
            if msg is None:
                return
            yield msg

    async def _read_loop(self) -> None:
        try:
            while True:
                got = await read_packet(self._reader)
                if got is None:
                    break
                packet = got[0]
                if isinstance(packet, Publish):
                    self._inbox.put_nowait(packet)
                elif isinstance(packet, Suback):
                    fut = self._pending.pop(packet.packet_id, None)
                    if fut is not None and not fut.done():
                        fut.set_result(packet)
                elif isinstance(packet, Pingresp):
                    if self._pongs:
                        fut = self._pongs.pop(0)
                        if not fut.done():
                            fut.set_result(None)
                elif isinstance(packet, Disconnect):
                    self.disconnect_reason = packet.reason_code
                    log.warning("broker disconnected us with reason %#04x", packet.reason_code)
                    break
        except codec.DecodeError as exc:
            log.error("undecodable packet from broker: %s", exc)
        finally:
            self._inbox.put_nowait(None)
            for fut in [*self._pending.values(), *self._pongs]:
                if not fut.done():
                    fut.set_exception(TransportError("connection closed"))
            self._pending.clear()
            self._pongs.clear()
            if self._writer is not None:
                self._writer.close()

    async def _ping_loop(self) -> None:
        while True:
            await asyncio.sleep(self.keep_alive)
            try:
                self._send(Pingreq())
            except TransportError:
                return

    async def disconnect(self) -> None:
        if self.connected:
            self._send(Disconnect())
            await self._writer.drain()
        await self.close()

    async def close(self) -> None:
        current = asyncio.current_task()
        for task in self._tasks:
            if task is not current:
                task.cancel()
        for task in self._tasks:
            if task is not current:
                try:
                    await task
                except (asyncio.CancelledError, Exception):
                    pass
        self._tasks = []
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except (OSError, ConnectionError):
                pass
            self._writer = None
            self._reader = None

    async def __aenter__(self) -> Client:
        return await self.connect()

    async def __aexit__(self, *exc) -> None:
        await self.disconnect()
