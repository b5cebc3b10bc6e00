"""Signature primitives used as the proof of key possession.

``sign(sk, m)`` returns the signature prepended to the message, ``s || m``;
``verify(pk, s || m)`` hands back ``m`` when the signature holds and
``None`` otherwise.  Instantiated with Ed25519 from ``cryptography``.
"""

from __future__ import annotations

import os
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

KEY_SIZE = 32
SIGNATURE_SIZE = 64

# Curve25519 field prime and Edwards d, for point decoding.
_P = 2**255 - 19
_D = (-121665 * pow(121666, -1, _P)) % _P
_SQRT_M1 = pow(2, (_P - 1) // 4, _P)


class MalformedBlob(ValueError):
    """Signed blob too short to contain a signature."""


class OpCounter:
    """Thread-safe tally of key derivations, signatures and verifications."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._counts: Counter[str] = Counter()

    def bump(self, name: str) -> None:
        with self._lock:
            self._counts[name] += 1

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def reset(self) -> None:
        with self._lock:
            self._counts.clear()


OPS = OpCounter()


@dataclass(frozen=True)
class SigningKey:
    sk: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.sk) != KEY_SIZE:
            raise ValueError(f"signing key must be {KEY_SIZE} bytes")


@dataclass(frozen=True)
class VerifyingKey:
    pk: bytes

    def __post_init__(self) -> None:
        if len(self.pk) != KEY_SIZE:
            raise ValueError(f"verifying key must be {KEY_SIZE} bytes")


@dataclass(frozen=True)
class SignedMessage:
    s: bytes
    m: bytes

    def to_bytes(self) -> bytes:
        return self.s + self.m

    @classmethod
    def from_bytes(cls, blob: bytes) -> SignedMessage:
        if len(blob) < SIGNATURE_SIZE:
            raise MalformedBlob(f"blob is {len(blob)} bytes, need at least {SIGNATURE_SIZE}")
        return cls(s=bytes(blob[:SIGNATURE_SIZE]), m=bytes(blob[SIGNATURE_SIZE:]))


def derive_public_key(sk: SigningKey) -> VerifyingKey:
    OPS.bump("derive")
    raw = Ed25519PrivateKey.from_private_bytes(sk.sk).public_key()
    return VerifyingKey(raw.public_bytes(Encoding.Raw, PublicFormat.Raw))


def keygen(randbytes: Callable[[int], bytes] = os.urandom) -> tuple[SigningKey, VerifyingKey]:
    sk = SigningKey(randbytes(KEY_SIZE))
    return sk, derive_public_key(sk)


def sign(sk: SigningKey, m: bytes) -> bytes:
    OPS.bump("sign")
    s = Ed25519PrivateKey.from_private_bytes(sk.sk).sign(bytes(m))
    return s + bytes(m)


def verify(pk: VerifyingKey, blob: bytes) -> bytes | None:
    """Return the signed message, or ``None`` if the signature is invalid.

    Raises :class:`MalformedBlob` when ``blob`` is shorter than a signature.
    """
    signed = SignedMessage.from_bytes(blob)
    OPS.bump("verify")
    try:
        Ed25519PublicKey.from_public_bytes(pk.pk).verify(signed.s, signed.m)
    except (InvalidSignature, ValueError):
        return None
    return signed.m


def is_valid_public_key(pk: bytes) -> bool:
    """True if ``pk`` is a canonical encoding of a point on edwards25519.

    ``cryptography`` accepts any 32 bytes at load time, so this is checked
    separately to reject clientIDs that can never verify.
    """
    if len(pk) != KEY_SIZE:
        return False
    n = int.from_bytes(pk, "little")
    sign_bit = n >> 255
    y = n & ((1 << 255) - 1)
    if y >= _P:
        return False
    u = (y * y - 1) % _P
    v = (_D * y * y + 1) % _P
    x2 = u * pow(v, -1, _P) % _P
    if x2 == 0:
        return sign_bit == 0
    x = pow(x2, (_P + 3) // 8, _P)
    if (x * x - x2) % _P != 0:
        x = x * _SQRT_M1 % _P
    return (x * x - x2) % _P == 0


# -- key files --------------------------------------------------------------


def format_key(sk: SigningKey) -> str:
    return f"sk={sk.sk.hex()}\n"


def parse_key(text: str) -> SigningKey:
    line = text.strip()
    if not line.startswith("sk=") or len(line) != 3 + 2 * KEY_SIZE:
        raise ValueError("key file must contain a single line 'sk=<64 hex chars>'")
    return SigningKey(bytes.fromhex(line[3:]))


def load_key(path: str | Path) -> SigningKey:
    return parse_key(Path(path).read_text())


def save_key(sk: SigningKey, path: str | Path) -> None:
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
    with os.fdopen(fd, "w") as f:
        f.write(format_key(sk))
