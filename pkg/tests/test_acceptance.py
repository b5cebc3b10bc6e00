"""One test per acceptance criterion; each prints a PASS/FAIL line in the summary."""

import asyncio
import os
import random
import time

from model import run_interleavings
from packets import random_packet
from smoker import codec, schnorr, sigscheme
from smoker.client import Client, NotAuthorized
from smoker.codec import ReasonCode
from smoker.harness import CLOSED, HONEST_FLOW, RECEIVED, run_scenario
from smoker.identity import decode_client_id, derive_client_id
from smoker.schnorr import SchnorrProof, default_group, keygen, prove, verify
from smoker.sigscheme import VerifyingKey


def _received(verdict, label):
    return [r.packet for r in verdict.transcript.records if r.conn == label and r.direction == RECEIVED]


def test_honest_handshake_order(broker, criterion):
    verdict = run_scenario("honest", broker.address)
    flow = verdict.transcript.flow()
    connack = _received(verdict, "victim")[-1]
    ok = verdict.passed and flow == HONEST_FLOW and connack.reason_code == 0 and verdict.elapsed < 1.0
    criterion(1, "honest CONNECT/AUTH/AUTH/CONNACK order over TCP", ok, f"{verdict.elapsed * 1000:.0f} ms")


def test_unknown_method_refused_and_closed(broker, criterion):
    verdict = run_scenario("unknown-method", broker.address)
    flow = [(d, n) for _, d, n in verdict.transcript.flow()]
    ok = (
        verdict.passed
        and flow[1:] == [(RECEIVED, "CONNACK"), (CLOSED, "CLOSE")]
        and _received(verdict, "client")[0].reason_code == ReasonCode.BAD_AUTHENTICATION_METHOD
        and verdict.elapsed < 1.0
    )
    criterion(2, "unknown method gives CONNACK 0x8C then close", ok, f"{verdict.elapsed * 1000:.0f} ms")


def test_reason_code_matrix(broker, criterion):
    expected = {
        "forged-signature": ("adversary", codec.Connack, 0x87),
        "invalid-client-id": ("short-id", codec.Connack, 0x85),
        "protocol-order-violation": ("auth-first", codec.Disconnect, 0x83),
    }
    seen = {}
    for name, (label, kind, code) in expected.items():
        verdict = run_scenario(name, broker.address)
        codes = [p.reason_code for p in _received(verdict, label) if isinstance(p, kind)]
        seen[name] = verdict.passed and codes[-1:] == [code]
    criterion(3, "reason codes 0x87 / 0x85 / 0x83", all(seen.values()), ", ".join(k for k, v in seen.items() if not v))


def test_anti_hijack_interleavings(broker, criterion):
    failures = run_interleavings(range(100))
    scenarios = ["id-steal-unauthenticated", "id-steal-evict", "stale-nonce-replay", "passive-observer-then-impersonate"]
    failed = [n for n in scenarios if not run_scenario(n, broker.address, registry_dump=broker.broker.dump).passed]
    violations = sum(len(v) for v in failures.values())
    criterion(
        4, "no hijack over 100 seeded interleavings", not failures and not failed,
        f"{violations} violations, scenario failures: {failed or 'none'}",
    )


def test_replay_resistance(broker, criterion):
    rng = random.Random(0)

    async def trials(n):
        rejected = 0
        for _ in range(n):
            key, _ = sigscheme.keygen(rng.randbytes)
            victim = Client(key, *broker.address, keep_alive=0, timeout=2.0)
            await victim.connect()
            captured = victim.last_proof
            if rng.random() < 0.5:
                await victim.close()
            thief = Client(key, *broker.address, keep_alive=0, timeout=2.0)
            try:
                await thief.connect(proof_override=captured)
            except NotAuthorized:
                rejected += 1
            else:
                await thief.close()
            await victim.close()
        return rejected

    rejected = asyncio.run(trials(100))
    criterion(5, "captured AUTH blob replay rejected", rejected == 100, f"{rejected}/100")


def test_schnorr_reference(criterion):
    start = time.perf_counter()
    small = schnorr.validate_group(schnorr.GroupParams(23, 11, 2), test_mode=True)
    rng = random.Random(6)
    small_ok = 0
    for _ in range(1000):
        kp = keygen(small, rng)
        small_ok += verify(small, kp.y, prove(small, kp, rng.randbytes(16), rng))
    big = default_group()
    big_ok = mutants_rejected = 0
    for i in range(100):
        kp = keygen(big, rng)
        proof = prove(big, kp, rng.randbytes(16), rng)
        big_ok += verify(big, kp.y, proof)
        field = i % 3
        if field == 0:
            bad = SchnorrProof(proof.t * big.g % big.p, proof.s, proof.public_data)
        elif field == 1:
            bad = SchnorrProof(proof.t, (proof.s + 1 + rng.randrange(big.q - 1)) % big.q, proof.public_data)
        else:
            data = bytearray(proof.public_data)
            data[rng.randrange(len(data))] ^= 1 << rng.randrange(8)
            bad = SchnorrProof(proof.t, proof.s, bytes(data))
        mutants_rejected += not verify(big, kp.y, bad)
    t, s = schnorr._respond(small, x=7, omega=3, c=5)
    worked = (t, s) == (8, 5) and schnorr._check(small, 13, 8, 5, 5)
    elapsed = time.perf_counter() - start
    ok = small_ok == 1000 and big_ok == 100 and mutants_rejected == 100 and worked and elapsed < 30
    criterion(
        6, "Schnorr completeness, soundness spot checks, worked vector", ok,
        f"small {small_ok}/1000, 2048-bit {big_ok}/100, mutants {mutants_rejected}/100, {elapsed:.1f} s",
    )


def test_identity_mapping(criterion):
    edge = [bytes(32), b"\xff" * 32, bytes(31) + b"\x01", b"\x80" + bytes(31)]
    lengths_ok = all(len(derive_client_id(VerifyingKey(pk))) == 43 for pk in edge + [os.urandom(32) for _ in range(1000)])
    roundtrip = 0
    for _ in range(1000):
        _, pk = sigscheme.keygen()
        roundtrip += decode_client_id(derive_client_id(pk)) == pk
    ok = lengths_ok and roundtrip == 1000 and 62**43 > 2**256
    criterion(7, "43-char base62 clientID, bijective, 62^43 > 2^256", ok, f"round trip {roundtrip}/1000")


def test_codec_roundtrip_and_fuzz(criterion):
    rng = random.Random(8)
    roundtrip = 0
    corpus = []
    for _ in range(10_000):
        p = random_packet(rng)
        raw = codec.encode_packet(p)
        roundtrip += codec.decode_packet(raw) == p
        corpus.append(raw)
    crashes = 0
    for i in range(100_000):
        if i % 2:
            data = rng.randbytes(rng.randrange(48))
        else:
            data = bytearray(rng.choice(corpus))
            for _ in range(rng.randint(1, 4)):
                op = rng.randrange(3)
                if op == 0 and data:
                    data[rng.randrange(len(data))] ^= 1 << rng.randrange(8)
                elif op == 1 and data:
                    del data[rng.randrange(len(data)):]
                else:
                    data.insert(rng.randrange(len(data) + 1), rng.randrange(256))
            data = bytes(data)
        try:
            codec.decode_packet(data)
        except codec.DecodeError:
            pass
        except Exception:  # noqa: BLE001 - any other exception is a crash
            crashes += 1
    ok = roundtrip == 10_000 and crashes == 0
    criterion(8, "codec round trip x10^4, fuzz x10^5", ok, f"round trip {roundtrip}/10000, crashes {crashes}")


def test_reconnect_cost(broker, criterion):
    async def go():
        key, _ = sigscheme.keygen()
        c = Client(key, *broker.address, keep_alive=0, timeout=2.0)
        await c.connect()
        per_reconnect = []
        for _ in range(10):
            sigscheme.OPS.reset()
            await c.reconnect()
            snap = sigscheme.OPS.snapshot()
            per_reconnect.append((snap.get("sign", 0), snap.get("derive", 0)))
        await c.disconnect()
        return per_reconnect

    counts = asyncio.run(go())
    ok = set(counts) == {(1, 0)}
    criterion(9, "one signature and no key derivation per reconnect", ok, f"(sign, derive) per reconnect: {set(counts)}")
