"""Hash-chain nonce generator with reseeding.

State is a 32-byte value seeded from an initialization vector.  Each nonce
is ``SHA-256(state || counter)`` with a 64-bit counter that only ever
increases, so no nonce repeats within the lifetime of one service.
Reseeding folds new material in as ``state = SHA-256(state || entropy)``;
the broker feeds every accepted client proof back this way.
"""

from __future__ import annotations

import copy
import hashlib
import os
import threading
from pathlib import Path

NONCE_SIZE = 32
SEED_SIZE = 32
TEST_SEED = bytes(SEED_SIZE)


class NonceService:
    def __init__(self, seed: bytes | None = None) -> None:
        if seed is None:
            seed = os.urandom(SEED_SIZE)
        if len(seed) != SEED_SIZE:
            raise ValueError(f"seed must be {SEED_SIZE} bytes")
        self._state = bytes(seed)
        self._counter = 0
        self._lock = threading.Lock()

    def next_nonce(self) -> bytes:
        with self._lock:
            out = hashlib.sha256(self._state + self._counter.to_bytes(8, "big")).digest()
            self._counter += 1
        return out

    def reseed(self, entropy: bytes) -> None:
        with self._lock:
            self._state = hashlib.sha256(self._state + bytes(entropy)).digest()

    def fork(self) -> NonceService:
        """Independent copy sharing the current state (for comparisons)."""
        with self._lock:
            clone = copy.copy(self)
        clone._lock = threading.Lock()
        return clone

    @classmethod
    def from_seed_file(cls, path: str | Path) -> NonceService:
        text = Path(path).read_text().strip()
        try:
            seed = bytes.fromhex(text)
        except ValueError:
            raise ValueError(f"{path}: seed file must hold {SEED_SIZE} bytes of hex") from None
        return cls(seed)
