"""Encoder and decoder for the MQTT 5.0 packet subset used by smoker.

Supported control packets: CONNECT, CONNACK, PUBLISH (QoS 0 only),
SUBSCRIBE, SUBACK, PINGREQ, PINGRESP, DISCONNECT and AUTH.

Packets are immutable dataclasses.  Properties are kept as an ordered tuple
of ``(property_id, value)`` pairs so that properties smoker does not
interpret survive a decode/encode round trip unchanged.  Encoding is
canonical: every packet value has exactly one byte representation, and the
decoder refuses non-minimal variable byte integers.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Union

MAX_VARINT = 268_435_455
MAX_STRING = 65_535


class CodecError(ValueError):
    pass


class DecodeError(CodecError):
    pass


class EncodeError(CodecError):
    pass


class Truncated(DecodeError):
    """Fewer bytes available than the fixed header announces."""


class BadVarint(DecodeError):
    pass


class UnknownPacketType(DecodeError):
    pass


class MalformedPacket(DecodeError):
    pass


class MalformedProperties(DecodeError):
    pass


class ProtocolViolation(DecodeError):
    pass


class VarintOverflow(EncodeError):
    pass


class Oversize(CodecError):
    """Remaining length above the permitted maximum."""


class PacketType(IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    SUBSCRIBE = 8
    SUBACK = 9
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14
    AUTH = 15


class ReasonCode(IntEnum):
    """Reason codes the broker and client emit."""

    SUCCESS = 0x00
    CONTINUE_AUTHENTICATION = 0x18
    IMPLEMENTATION_SPECIFIC_ERROR = 0x83
    CLIENT_IDENTIFIER_NOT_VALID = 0x85
    NOT_AUTHORIZED = 0x87
    BAD_AUTHENTICATION_METHOD = 0x8C


class Prop(IntEnum):
    PAYLOAD_FORMAT_INDICATOR = 0x01
    MESSAGE_EXPIRY_INTERVAL = 0x02
    CONTENT_TYPE = 0x03
    RESPONSE_TOPIC = 0x08
    CORRELATION_DATA = 0x09
    SUBSCRIPTION_IDENTIFIER = 0x0B
    SESSION_EXPIRY_INTERVAL = 0x11
    ASSIGNED_CLIENT_IDENTIFIER = 0x12
    SERVER_KEEP_ALIVE = 0x13
    AUTHENTICATION_METHOD = 0x15
    AUTHENTICATION_DATA = 0x16
    REQUEST_PROBLEM_INFORMATION = 0x17
    REQUEST_RESPONSE_INFORMATION = 0x19
    RESPONSE_INFORMATION = 0x1A
    SERVER_REFERENCE = 0x1C
    REASON_STRING = 0x1F
    RECEIVE_MAXIMUM = 0x21
    TOPIC_ALIAS_MAXIMUM = 0x22
    TOPIC_ALIAS = 0x23
    MAXIMUM_QOS = 0x24
    RETAIN_AVAILABLE = 0x25
    USER_PROPERTY = 0x26
    MAXIMUM_PACKET_SIZE = 0x27
    WILDCARD_SUBSCRIPTION_AVAILABLE = 0x28
    SUBSCRIPTION_IDENTIFIER_AVAILABLE = 0x29
    SHARED_SUBSCRIPTION_AVAILABLE = 0x2A


_T = PacketType
_BYTE, _U16, _U32, _VARINT, _STR, _BIN, _PAIR = range(7)

# property id -> (value kind, packet types that may carry it)
PROPERTY_SPEC: dict[int, tuple[int, frozenset[PacketType]]] = {
    Prop.PAYLOAD_FORMAT_INDICATOR: (_BYTE, frozenset({_T.PUBLISH})),
    Prop.MESSAGE_EXPIRY_INTERVAL: (_U32, frozenset({_T.PUBLISH})),
    Prop.CONTENT_TYPE: (_STR, frozenset({_T.PUBLISH})),
    Prop.RESPONSE_TOPIC: (_STR, frozenset({_T.PUBLISH})),
    Prop.CORRELATION_DATA: (_BIN, frozenset({_T.PUBLISH})),
    Prop.SUBSCRIPTION_IDENTIFIER: (_VARINT, frozenset({_T.PUBLISH, _T.SUBSCRIBE})),
    Prop.SESSION_EXPIRY_INTERVAL: (_U32, frozenset({_T.CONNECT, _T.CONNACK, _T.DISCONNECT})),
    Prop.ASSIGNED_CLIENT_IDENTIFIER: (_STR, frozenset({_T.CONNACK})),
    Prop.SERVER_KEEP_ALIVE: (_U16, frozenset({_T.CONNACK})),
    Prop.AUTHENTICATION_METHOD: (_STR, frozenset({_T.CONNECT, _T.CONNACK, _T.AUTH})),
    Prop.AUTHENTICATION_DATA: (_BIN, frozenset({_T.CONNECT, _T.CONNACK, _T.AUTH})),
    Prop.REQUEST_PROBLEM_INFORMATION: (_BYTE, frozenset({_T.CONNECT})),
    Prop.REQUEST_RESPONSE_INFORMATION: (_BYTE, frozenset({_T.CONNECT})),
    Prop.RESPONSE_INFORMATION: (_STR, frozenset({_T.CONNACK})),
    Prop.SERVER_REFERENCE: (_STR, frozenset({_T.CONNACK, _T.DISCONNECT})),
    Prop.REASON_STRING: (_STR, frozenset({_T.CONNACK, _T.SUBACK, _T.DISCONNECT, _T.AUTH})),
    Prop.RECEIVE_MAXIMUM: (_U16, frozenset({_T.CONNECT, _T.CONNACK})),
    Prop.TOPIC_ALIAS_MAXIMUM: (_U16, frozenset({_T.CONNECT, _T.CONNACK})),
    Prop.TOPIC_ALIAS: (_U16, frozenset({_T.PUBLISH})),
    Prop.MAXIMUM_QOS: (_BYTE, frozenset({_T.CONNACK})),
    Prop.RETAIN_AVAILABLE: (_BYTE, frozenset({_T.CONNACK})),
    Prop.USER_PROPERTY: (_PAIR, frozenset(_T) - {_T.PINGREQ, _T.PINGRESP}),
    Prop.MAXIMUM_PACKET_SIZE: (_U32, frozenset({_T.CONNECT, _T.CONNACK})),
    Prop.WILDCARD_SUBSCRIPTION_AVAILABLE: (_BYTE, frozenset({_T.CONNACK})),
    Prop.SUBSCRIPTION_IDENTIFIER_AVAILABLE: (_BYTE, frozenset({_T.CONNACK})),
    Prop.SHARED_SUBSCRIPTION_AVAILABLE: (_BYTE, frozenset({_T.CONNACK})),
}
_REPEATABLE = {Prop.USER_PROPERTY, Prop.SUBSCRIPTION_IDENTIFIER}

PropertyValue = Union[int, str, bytes, tuple[str, str]]
Properties = tuple[tuple[int, PropertyValue], ...]


def get_property(props: Properties, prop_id: int, default=None):
    for pid, value in props:
        if pid == prop_id:
            return value
    return default


def auth_properties(method: str, data: bytes | None = None) -> Properties:
    props: list[tuple[int, PropertyValue]] = [(Prop.AUTHENTICATION_METHOD, method)]
    if data is not None:
        props.append((Prop.AUTHENTICATION_DATA, bytes(data)))
    return tuple(props)


# -- packets ----------------------------------------------------------------


@dataclass(frozen=True)
class Connect:
    client_id: str
    keep_alive: int = 60
    clean_start: bool = True
    username: str | None = None
    password: bytes | None = None
    properties: Properties = ()

    @property
    def auth_method(self) -> str | None:
        return get_property(self.properties, Prop.AUTHENTICATION_METHOD)


@dataclass(frozen=True)
class Connack:
    reason_code: int
    session_present: bool = False
    properties: Properties = ()


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes = b""
    retain: bool = False
    properties: Properties = ()


@dataclass(frozen=True)
class Subscribe:
    packet_id: int
    topics: tuple[tuple[str, int], ...]
    properties: Properties = ()


@dataclass(frozen=True)
class Suback:
    packet_id: int
    reason_codes: tuple[int, ...]
    properties: Properties = ()


@dataclass(frozen=True)
class Pingreq:
    pass


@dataclass(frozen=True)
class Pingresp:
    pass


@dataclass(frozen=True)
class Disconnect:
    reason_code: int = ReasonCode.SUCCESS
    properties: Properties = ()


@dataclass(frozen=True)
class Auth:
    reason_code: int = ReasonCode.CONTINUE_AUTHENTICATION
    properties: Properties = ()

    @property
    def auth_method(self) -> str | None:
        return get_property(self.properties, Prop.AUTHENTICATION_METHOD)

    @property
    def auth_data(self) -> bytes | None:
        return get_property(self.properties, Prop.AUTHENTICATION_DATA)


Packet = Union[Connect, Connack, Publish, Subscribe, Suback, Pingreq, Pingresp, Disconnect, Auth]

PACKET_TYPE: dict[type, PacketType] = {
    Connect: _T.CONNECT,
    Connack: _T.CONNACK,
    Publish: _T.PUBLISH,
    Subscribe: _T.SUBSCRIBE,
    Suback: _T.SUBACK,
    Pingreq: _T.PINGREQ,
    Pingresp: _T.PINGRESP,
    Disconnect: _T.DISCONNECT,
    Auth: _T.AUTH,
}


# -- primitives -------------------------------------------------------------


def encode_varint(n: int) -> bytes:
    if not 0 <= n <= MAX_VARINT:
        raise VarintOverflow(f"{n} is outside [0, {MAX_VARINT}]")
    out = bytearray()
    while True:
        n, digit = divmod(n, 128)
        if n:
            out.append(digit | 0x80)
        else:
            out.append(digit)
            return bytes(out)


def decode_varint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Decode a variable byte integer at ``offset``; return ``(value, consumed)``."""
    value = 0
    for i in range(4):
        if offset + i >= len(data):
            raise Truncated("variable byte integer runs past end of data")
        byte = data[offset + i]
        value |= (byte & 0x7F) << (7 * i)
        if not byte & 0x80:
            if i and byte == 0:
                raise BadVarint("non-minimal variable byte integer")
            return value, i + 1
    raise BadVarint("continuation bit set on fourth byte")


def _u16(n: int) -> bytes:
    if not 0 <= n <= 0xFFFF:
        raise EncodeError(f"{n} does not fit in two bytes")
    return n.to_bytes(2, "big")


def _u32(n: int) -> bytes:
    if not 0 <= n <= 0xFFFFFFFF:
        raise EncodeError(f"{n} does not fit in four bytes")
    return n.to_bytes(4, "big")


def _byte(n: int) -> bytes:
    if not 0 <= n <= 0xFF:
        raise EncodeError(f"{n} does not fit in one byte")
    return bytes((n,))


def _binary(b: bytes) -> bytes:
    if len(b) > MAX_STRING:
        raise EncodeError("binary field longer than 65535 bytes")
    return len(b).to_bytes(2, "big") + bytes(b)


def _string(s: str) -> bytes:
    if "\x00" in s:
        raise EncodeError("UTF-8 strings may not contain U+0000")
    try:
        raw = s.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise EncodeError(str(exc)) from None
    return _binary(raw)


class _Reader:
    """Bounded cursor over one packet body."""

    def __init__(self, data: bytes, pos: int = 0, end: int | None = None) -> None:
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    @property
    def remaining(self) -> int:
        return self.end - self.pos

    def take(self, n: int) -> bytes:
        if n > self.remaining:
            raise MalformedPacket("field overruns packet")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return bytes(chunk)

    def byte(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "big")

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "big")

    def varint(self) -> int:
        try:
            value, used = decode_varint(self.data[:self.end], self.pos)
        except Truncated:
            raise MalformedPacket("variable byte integer overruns packet") from None
        self.pos += used
        return value

    def binary(self) -> bytes:
        return self.take(self.u16())

    def string(self) -> str:
        raw = self.binary()
        try:
            s = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedPacket("invalid UTF-8 string") from None
        if "\x00" in s:
            raise MalformedPacket("UTF-8 string contains U+0000")
        return s


# -- properties -------------------------------------------------------------


def _encode_properties(ptype: PacketType, props: Properties) -> bytes:
    body = bytearray()
    seen: set[int] = set()
    for pid, value in props:
        spec = PROPERTY_SPEC.get(pid)
        if spec is None or ptype not in spec[1]:
            raise EncodeError(f"property {pid:#04x} not allowed in {ptype.name}")
        if pid in seen and pid not in _REPEATABLE:
            raise EncodeError(f"property {pid:#04x} repeated")
        seen.add(pid)
        kind = spec[0]
        body += encode_varint(pid)
        if kind == _BYTE:
            body += _byte(value)
        elif kind == _U16:
            body += _u16(value)
        elif kind == _U32:
            body += _u32(value)
        elif kind == _VARINT:
            body += encode_varint(value)
        elif kind == _STR:
            body += _string(value)
        elif kind == _BIN:
            body += _binary(value)
        else:
            body += _string(value[0]) + _string(value[1])
    _check_auth_props(ptype, seen, EncodeError)
    return encode_varint(len(body)) + bytes(body)


def _decode_properties(ptype: PacketType, r: _Reader) -> Properties:
    length = r.varint()
    if length > r.remaining:
        raise MalformedProperties("property length overruns packet")
    sub = _Reader(r.data, r.pos, r.pos + length)
    r.pos += length
    props: list[tuple[int, PropertyValue]] = []
    seen: set[int] = set()
    try:
        while sub.remaining:
            pid = sub.varint()
            spec = PROPERTY_SPEC.get(pid)
            if spec is None:
                raise MalformedProperties(f"unknown property {pid:#04x}")
            if ptype not in spec[1]:
                raise MalformedProperties(f"property {pid:#04x} not allowed in {ptype.name}")
            if pid in seen and pid not in _REPEATABLE:
                raise MalformedProperties(f"property {pid:#04x} repeated")
            seen.add(pid)
            kind = spec[0]
            value: PropertyValue
            if kind == _BYTE:
                value = sub.byte()
            elif kind == _U16:
                value = sub.u16()
            elif kind == _U32:
                value = sub.u32()
            elif kind == _VARINT:
                value = sub.varint()
            elif kind == _STR:
                value = sub.string()
            elif kind == _BIN:
                value = sub.binary()
            else:
                value = (sub.string(), sub.string())
            props.append((Prop(pid), value))
    except MalformedProperties:
        raise
    except (MalformedPacket, BadVarint) as exc:
        raise MalformedProperties(str(exc)) from None
    _check_auth_props(ptype, seen, ProtocolViolation)
    return tuple(props)


def _check_auth_props(ptype: PacketType, seen: set[int], error: type[CodecError]) -> None:
    if Prop.AUTHENTICATION_DATA in seen and Prop.AUTHENTICATION_METHOD not in seen:
        raise error("authentication data without authentication method")
    if ptype == _T.AUTH and Prop.AUTHENTICATION_METHOD not in seen:
        raise error("AUTH packet without authentication method")


# -- encode -----------------------------------------------------------------


def _has_wildcard(topic: str) -> bool:
    return "+" in topic or "#" in topic


def encode_packet(p: Packet) -> bytes:
    ptype = PACKET_TYPE.get(type(p))
    if ptype is None:
        raise EncodeError(f"not a packet: {p!r}")
    flags = 0
    if isinstance(p, Connect):
        cflags = 0x02 if p.clean_start else 0
        if p.username is not None:
            cflags |= 0x80
        if p.password is not None:
            cflags |= 0x40
        body = _string("MQTT") + b"\x05" + bytes((cflags,)) + _u16(p.keep_alive)
        body += _encode_properties(ptype, p.properties) + _string(p.client_id)
        if p.username is not None:
            body += _string(p.username)
        if p.password is not None:
            body += _binary(p.password)
    elif isinstance(p, Connack):
        body = bytes((int(p.session_present),)) + _byte(p.reason_code)
        body += _encode_properties(ptype, p.properties)
    elif isinstance(p, Publish):
        if not p.topic or _has_wildcard(p.topic):
            raise EncodeError("PUBLISH topic must be non-empty and wildcard-free")
        flags = int(p.retain)
        body = _string(p.topic) + _encode_properties(ptype, p.properties) + bytes(p.payload)
    elif isinstance(p, Subscribe):
        if not p.topics:
            raise EncodeError("SUBSCRIBE needs at least one topic filter")
        if p.packet_id == 0:
            raise EncodeError("packet identifier must be non-zero")
        flags = 0x02
        body = _u16(p.packet_id) + _encode_properties(ptype, p.properties)
        for topic, options in p.topics:
            if not topic:
                raise EncodeError("empty topic filter")
            _check_sub_options(options, EncodeError)
            body += _string(topic) + _byte(options)
    elif isinstance(p, Suback):
        if p.packet_id == 0:
            raise EncodeError("packet identifier must be non-zero")
        body = _u16(p.packet_id) + _encode_properties(ptype, p.properties)
        body += b"".join(_byte(rc) for rc in p.reason_codes)
    elif isinstance(p, (Pingreq, Pingresp)):
        body = b""
    elif isinstance(p, Disconnect):
        if p.properties:
            body = _byte(p.reason_code) + _encode_properties(ptype, p.properties)
        elif p.reason_code != ReasonCode.SUCCESS:
            body = _byte(p.reason_code)
        else:
            body = b""
    else:
        body = _byte(p.reason_code) + _encode_properties(ptype, p.properties)
    if len(body) > MAX_VARINT:
        raise Oversize(f"remaining length {len(body)} exceeds {MAX_VARINT}")
    return bytes(((ptype << 4) | flags,)) + encode_varint(len(body)) + body


def _check_sub_options(options: int, error: type[CodecError]) -> None:
    if options & 0xC0 or (options & 0x03) == 3 or (options >> 4) & 0x03 == 3:
        raise error(f"invalid subscription options {options:#04x}")


# -- decode -----------------------------------------------------------------

_REQUIRED_FLAGS = {t: 0 for t in PacketType}
_REQUIRED_FLAGS[_T.SUBSCRIBE] = 0x02


def parse_fixed_header(data: bytes) -> tuple[PacketType, int, int, int]:
    """Return ``(type, flags, remaining_length, header_length)``.

    Raises :class:`Truncated` if the header itself is incomplete.
    """
    if not data:
        raise Truncated("empty input")
    first = data[0]
    try:
        ptype = PacketType(first >> 4)
    except ValueError:
        raise UnknownPacketType(f"packet type {first >> 4}") from None
    flags = first & 0x0F
    if ptype != _T.PUBLISH and flags != _REQUIRED_FLAGS[ptype]:
        raise MalformedPacket(f"bad fixed-header flags {flags:#x} for {ptype.name}")
    length, used = decode_varint(data, 1)
    return ptype, flags, length, 1 + used


def try_decode(buffer: bytes, max_size: int = MAX_VARINT) -> tuple[Packet, int] | None:
    """Decode the first packet in ``buffer``.

    Returns ``(packet, bytes_consumed)``, or ``None`` if more data is needed.
    """
    try:
        ptype, flags, length, hlen = parse_fixed_header(buffer)
    except Truncated:
        return None
    if length > max_size:
        raise Oversize(f"remaining length {length} exceeds {max_size}")
    if len(buffer) < hlen + length:
        return None
    return _decode_body(ptype, flags, bytes(buffer[hlen:hlen + length])), hlen + length


def decode_packet(data: bytes) -> Packet:
    """Decode exactly one complete packet."""
    ptype, flags, length, hlen = parse_fixed_header(data)
    if len(data) < hlen + length:
        raise Truncated(f"remaining length {length} but only {len(data) - hlen} bytes follow")
    if len(data) > hlen + length:
        raise MalformedPacket("trailing bytes after packet")
    return _decode_body(ptype, flags, bytes(data[hlen:]))


def _decode_body(ptype: PacketType, flags: int, body: bytes) -> Packet:
    r = _Reader(body)
    packet: Packet
    if ptype == _T.CONNECT:
        if r.string() != "MQTT":
            raise ProtocolViolation("protocol name is not MQTT")
        if r.byte() != 5:
            raise ProtocolViolation("only MQTT protocol level 5 is supported")
        cflags = r.byte()
        if cflags & 0x01:
            raise MalformedPacket("reserved connect flag set")
        if cflags & 0x3C:
            raise ProtocolViolation("will messages are not supported")
        keep_alive = r.u16()
        props = _decode_properties(ptype, r)
        client_id = r.string()
        username = r.string() if cflags & 0x80 else None
        password = r.binary() if cflags & 0x40 else None
        packet = Connect(client_id, keep_alive, bool(cflags & 0x02), username, password, props)
    elif ptype == _T.CONNACK:
        ack = r.byte()
        if ack & 0xFE:
            raise MalformedPacket("reserved CONNACK flags set")
        rc = r.byte()
        packet = Connack(rc, bool(ack), _decode_properties(ptype, r))
    elif ptype == _T.PUBLISH:
        if flags & 0x06:
            raise ProtocolViolation("only QoS 0 PUBLISH is supported")
        if flags & 0x08:
            raise ProtocolViolation("DUP flag set on QoS 0 PUBLISH")
        topic = r.string()
        if not topic or _has_wildcard(topic):
            raise ProtocolViolation("PUBLISH topic must be non-empty and wildcard-free")
        props = _decode_properties(ptype, r)
        packet = Publish(topic, r.take(r.remaining), bool(flags & 0x01), props)
    elif ptype == _T.SUBSCRIBE:
        pid = r.u16()
        if pid == 0:
            raise ProtocolViolation("packet identifier must be non-zero")
        props = _decode_properties(ptype, r)
        topics = []
        while r.remaining:
            topic = r.string()
            if not topic:
                raise ProtocolViolation("empty topic filter")
            options = r.byte()
            _check_sub_options(options, MalformedPacket)
            topics.append((topic, options))
        if not topics:
            raise ProtocolViolation("SUBSCRIBE without topic filters")
        packet = Subscribe(pid, tuple(topics), props)
    elif ptype == _T.SUBACK:
        pid = r.u16()
        if pid == 0:
            raise ProtocolViolation("packet identifier must be non-zero")
        props = _decode_properties(ptype, r)
        packet = Suback(pid, tuple(r.take(r.remaining)), props)
    elif ptype in (_T.PINGREQ, _T.PINGRESP):
        packet = Pingreq() if ptype == _T.PINGREQ else Pingresp()
    elif ptype == _T.DISCONNECT:
        rc = r.byte() if r.remaining else ReasonCode.SUCCESS
        props = _decode_properties(ptype, r) if r.remaining else ()
        packet = Disconnect(rc, props)
    else:
        if not r.remaining:
            raise ProtocolViolation("AUTH packet without authentication method")
        rc = r.byte()
        packet = Auth(rc, _decode_properties(ptype, r))
    if r.remaining:
        raise MalformedPacket(f"{r.remaining} unexpected bytes at end of {ptype.name}")
    return packet
