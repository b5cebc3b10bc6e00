"""Regenerate src/smoker/data/modp2048_q256.txt.

Candidates are drawn from a SHA-256 counter stream over a public label so
the parameters are reproducible and carry no hidden structure:

    q = first 256-bit probable prime in the stream
    p = k*q + 1 for the first even k (from the stream) giving a 2048-bit prime
    g = h^((p-1)/q) mod p for the smallest h >= 2 with g != 1
"""

import hashlib
import sys

sys.path.insert(0, "src")
from smoker.schnorr import GroupParams, format_group, is_probable_prime, validate_group  # noqa: E402

LABEL = b"smoker finite-field reference group 2048/256"


def stream(tag: bytes, nbytes: int):
    counter = 0
    while True:
        out = b""
        while len(out) < nbytes:
            out += hashlib.sha256(LABEL + tag + counter.to_bytes(8, "big") + len(out).to_bytes(4, "big")).digest()
        counter += 1
        yield int.from_bytes(out[:nbytes], "big")


def main() -> None:
    for cand in stream(b"q", 32):
        q = cand | (1 << 255) | 1
        if is_probable_prime(q):
            break
    for cand in stream(b"k", 224):
        k = (cand | (1 << (2048 - 256 - 1))) & ~1
        p = k * q + 1
        if p.bit_length() == 2048 and is_probable_prime(p):
            break
    h = 2
    while (g := pow(h, (p - 1) // q, p)) == 1:
        h += 1
    params = validate_group(GroupParams(p, q, g))
    sys.stdout.write(format_group(params))


if __name__ == "__main__":
    main()
