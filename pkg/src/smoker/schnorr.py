"""Schnorr non-interactive zero-knowledge proof over a prime-order subgroup.

Finite-field reference implementation of the RFC 8235 proof of knowledge
of a discrete logarithm.  The live protocol path signs broker nonces with
:mod:`smoker.sigscheme`; this module exists to document and test the
underlying math.  It makes no constant-time claims.

Hash input framing: every field is written as a 4-byte big-endian length
followed by its bytes.  Integers use their minimal big-endian magnitude
(zero is the empty string).  The challenge is SHA-256 over the framed
``g || t || y || public_data``, read as a big-endian integer mod q.
"""

from __future__ import annotations

import hashlib
import random
import secrets
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

MR_ROUNDS = 64
MIN_P_BITS = 2048
MIN_Q_BITS = 256

_SMALL_PRIMES = (3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97)


class GroupError(ValueError):
    """Group parameters failed validation."""


class NotPrime(GroupError):
    pass


class OrderMismatch(GroupError):
    pass


class BadGenerator(GroupError):
    pass


class WeakGroup(GroupError):
    """Parameters are below production size and test mode is off."""


@dataclass(frozen=True)
class GroupParams:
    p: int
    q: int
    g: int

    @property
    def bits(self) -> tuple[int, int]:
        return self.p.bit_length(), self.q.bit_length()


@dataclass(frozen=True, repr=False)
class SchnorrKeypair:
    x: int
    y: int

    def __repr__(self) -> str:
        return f"SchnorrKeypair(x=<hidden>, y={self.y:#x})"


@dataclass(frozen=True)
class SchnorrProof:
    t: int
    s: int
    public_data: bytes


def is_probable_prime(n: int, rounds: int = MR_ROUNDS, rng: random.Random | None = None) -> bool:
    """Miller-Rabin with ``rounds`` random bases."""
    if n < 2:
        return False
    if n in (2, 3):
        return True
    if n % 2 == 0:
        return False
    for sp in _SMALL_PRIMES:
        if n == sp:
            return True
        if n % sp == 0:
            return False
    rng = rng or secrets.SystemRandom()
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def validate_group(params: GroupParams, *, test_mode: bool = False) -> GroupParams:
    """Return ``params`` unchanged if they describe a prime-order subgroup.

    Raises :class:`NotPrime`, :class:`OrderMismatch` or :class:`BadGenerator`.
    Outside ``test_mode`` groups smaller than 2048/256 bits raise
    :class:`WeakGroup`.
    """
    p, q, g = params.p, params.q, params.g
    if not is_probable_prime(p):
        raise NotPrime(f"p is composite: {p:#x}")
    if not is_probable_prime(q):
        raise NotPrime(f"q is composite: {q:#x}")
    if (p - 1) % q != 0:
        raise OrderMismatch("q does not divide p - 1")
    if not 1 < g < p or pow(g, q, p) != 1:
        raise BadGenerator("g does not generate the order-q subgroup")
    if not test_mode and (p.bit_length() < MIN_P_BITS or q.bit_length() < MIN_Q_BITS):
        raise WeakGroup(f"group is {p.bit_length()}/{q.bit_length()} bits; test mode required")
    return params


def in_subgroup(params: GroupParams, v: int) -> bool:
    return 1 <= v < params.p and pow(v, params.q, params.p) == 1


def keypair_from_secret(params: GroupParams, x: int) -> SchnorrKeypair:
    if not 1 <= x < params.q:
        raise ValueError("secret scalar must lie in [1, q-1]")
    return SchnorrKeypair(x=x, y=pow(params.g, x, params.p))


def keygen(params: GroupParams, rng: random.Random | None = None) -> SchnorrKeypair:
    rng = rng or secrets.SystemRandom()
    return keypair_from_secret(params, rng.randrange(1, params.q))


def _frame(value: int | bytes) -> bytes:
    if isinstance(value, int):
        value = value.to_bytes((value.bit_length() + 7) // 8, "big")
    return len(value).to_bytes(4, "big") + value


def compute_challenge(params: GroupParams, t: int, y: int, public_data: bytes) -> int:
    h = hashlib.sha256()
    for field in (params.g, t, y, bytes(public_data)):
        h.update(_frame(field))
    return int.from_bytes(h.digest(), "big") % params.q


def _respond(params: GroupParams, x: int, omega: int, c: int) -> tuple[int, int]:
    # Test hook: fixed omega and c.
    return pow(params.g, omega, params.p), (omega + x * c) % params.q


def prove(
    params: GroupParams,
    keypair: SchnorrKeypair,
    public_data: bytes,
    rng: random.Random | None = None,
) -> SchnorrProof:
    rng = rng or secrets.SystemRandom()
    omega = rng.randrange(1, params.q)
    t = pow(params.g, omega, params.p)
    c = compute_challenge(params, t, keypair.y, public_data)
    _, s = _respond(params, keypair.x, omega, c)
    return SchnorrProof(t=t, s=s, public_data=bytes(public_data))


def _check(params: GroupParams, y: int, t: int, s: int, c: int) -> bool:
    # Test hook: verification equation with a caller-supplied challenge.
    p = params.p
    if y == 1 or not in_subgroup(params, y) or not in_subgroup(params, t):
        return False
    if not 0 <= s < params.q:
        return False
    return pow(params.g, s, p) == (t * pow(y, c, p)) % p


def verify(params: GroupParams, y: int, proof: SchnorrProof) -> bool:
    c = compute_challenge(params, proof.t, y, proof.public_data)
    return _check(params, y, proof.t, proof.s, c)


# -- file formats -----------------------------------------------------------


def parse_group(text: str) -> GroupParams:
    fields: dict[str, int] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or key not in ("p", "q", "g"):
            raise ValueError(f"bad group parameter line: {line!r}")
        fields[key] = int(value, 16)
    missing = {"p", "q", "g"} - fields.keys()
    if missing:
        raise ValueError(f"missing group parameters: {sorted(missing)}")
    return GroupParams(**fields)


def format_group(params: GroupParams) -> str:
    return f"p={params.p:x}\nq={params.q:x}\ng={params.g:x}\n"


def load_group(path: str | Path) -> GroupParams:
    return parse_group(Path(path).read_text())


def default_group() -> GroupParams:
    """The shipped 2048-bit group with a 256-bit prime-order subgroup."""
    text = resources.files("smoker").joinpath("data/modp2048_q256.txt").read_text()
    return parse_group(text)


@dataclass(frozen=True)
class ProofVector:
    y: int
    proof: SchnorrProof
    expected: bool


def _hex(v: int | bytes) -> str:
    return v.hex() if isinstance(v, bytes) else f"{v:x}"


def format_vectors(vectors: Iterable[ProofVector]) -> str:
    lines = []
    for v in vectors:
        fields = (v.y, v.proof.t, v.proof.s, v.proof.public_data)
        lines.append("\t".join(map(_hex, fields)) + "\t" + ("accept" if v.expected else "reject"))
    return "\n".join(lines) + "\n"


def parse_vectors(text: str) -> Iterator[ProofVector]:
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5 or parts[4] not in ("accept", "reject"):
            raise ValueError(f"line {lineno}: expected 'y t s public_data accept|reject'")
        y, t, s = (int(x, 16) for x in parts[:3])
        proof = SchnorrProof(t=t, s=s, public_data=bytes.fromhex(parts[3]))
        yield ProofVector(y=y, proof=proof, expected=parts[4] == "accept")
