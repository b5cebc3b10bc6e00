"""Public keys as MQTT clientIDs.

A 32-byte public key is read as a big-endian integer and written in base 62
(digits, then upper case, then lower case), zero-padded to 43 characters.
62**43 exceeds 2**256, so every key fits and the mapping is a bijection.
"""

from __future__ import annotations

import string

from .sigscheme import KEY_SIZE, VerifyingKey, is_valid_public_key

ALPHABET = string.digits + string.ascii_uppercase + string.ascii_lowercase
CLIENT_ID_LENGTH = 43
_INDEX = {ch: i for i, ch in enumerate(ALPHABET)}


class InvalidClientId(ValueError):
    pass


class BadLength(InvalidClientId):
    pass


class BadAlphabet(InvalidClientId):
    pass


class Overflow(InvalidClientId):
    pass


class NotACurvePoint(InvalidClientId):
    pass


def derive_client_id(pk: VerifyingKey) -> str:
    n = int.from_bytes(pk.pk, "big")
    digits = []
    while n:
        n, r = divmod(n, 62)
        digits.append(ALPHABET[r])
    return "".join(reversed(digits)).rjust(CLIENT_ID_LENGTH, "0")


def decode_client_id(client_id: str) -> VerifyingKey:
    if len(client_id) != CLIENT_ID_LENGTH:
        raise BadLength(f"clientID must be {CLIENT_ID_LENGTH} characters, got {len(client_id)}")
    n = 0
    for ch in client_id:
        try:
            n = n * 62 + _INDEX[ch]
        except KeyError:
            raise BadAlphabet(f"character {ch!r} is not in [0-9A-Za-z]") from None
    if n >> (8 * KEY_SIZE):
        raise Overflow("clientID encodes a value of 2**256 or more")
    pk = n.to_bytes(KEY_SIZE, "big")
    if not is_valid_public_key(pk):
        raise NotACurvePoint("clientID does not encode a valid public key")
    return VerifyingKey(pk)


def is_smoker_client_id(client_id: str) -> bool:
    try:
        decode_client_id(client_id)
    except InvalidClientId:
        return False
    return True
