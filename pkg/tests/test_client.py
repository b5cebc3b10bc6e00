import asyncio

import pytest

from smoker import codec, sigscheme
from smoker.client import (
    BadMethod,
    Client,
    ClientConfig,
    IdRejected,
    MalformedChallenge,
    NotAuthorized,
    TransportError,
    parse_address,
)
from smoker.identity import derive_client_id
from smoker.sigscheme import derive_public_key, keygen


def run(coro):
    return asyncio.run(asyncio.wait_for(coro, 10))


def make_client(broker, key=None, **kw):
    key = key or keygen()[0]
    return Client(key, *broker.address, keep_alive=0, timeout=2.0, **kw)


def test_parse_address():
    assert parse_address("h:1") == ("h", 1)
    assert parse_address("h") == ("h", 1883)
    assert parse_address(":9") == ("127.0.0.1", 9)
    assert parse_address("[::1]:9") == ("::1", 9)


def test_client_id_derived_once():
    key, pk = keygen()
    c = Client(key)
    assert c.client_id == derive_client_id(pk)


def test_honest_connect(broker):
    async def go():
        c = make_client(broker)
        await c.connect()
        await c.ping()
        assert broker.broker.dump() == f"{c.client_id}\ttrue\t0\n"
        assert len(c.nonces) == 1 and len(c.last_proof) == 96
        await c.disconnect()

    run(go())


def test_context_manager(broker):
    async def go():
        async with make_client(broker) as c:
            assert c.connected
        assert not c.connected

    run(go())


def test_bad_method(broker):
    with pytest.raises(BadMethod):
        run(make_client(broker, method="PLAIN").connect())


def test_wrong_key_for_claimed_id(broker):
    other = derive_client_id(keygen()[1])
    with pytest.raises(NotAuthorized):
        run(make_client(broker, client_id=other).connect())


def test_invalid_id(broker):
    with pytest.raises(IdRejected):
        run(make_client(broker, client_id="not-a-key").connect())


def test_reconnect_gets_fresh_nonce(broker):
    async def go():
        c = make_client(broker)
        await c.connect()
        for _ in range(10):
            await c.reconnect()
        await c.disconnect()
        return c.nonces

    nonces = run(go())
    assert len(nonces) == 11 == len(set(nonces))


def test_replayed_proof_rejected(broker):
    async def go():
        c = make_client(broker)
        await c.connect()
        stale = c.last_proof
        await c.close()
        with pytest.raises(NotAuthorized):
            await c.connect(proof_override=stale)

    run(go())


def test_reconnect_costs_one_signature(broker):
    async def go():
        c = make_client(broker)
        await c.connect()
        sigscheme.OPS.reset()
        await c.reconnect()
        client_ops = sigscheme.OPS.snapshot()
        await c.disconnect()
        return client_ops

    ops = run(go())
    # The in-process broker adds one verify; the client adds one sign and no derives.
    assert ops == {"sign": 1, "verify": 1}


def test_transport_error():
    async def go():
        c = Client(keygen()[0], "127.0.0.1", 1, timeout=1.0)
        await c.connect()

    with pytest.raises(TransportError):
        run(go())


@pytest.mark.parametrize("nonce_len", [0, 16, 33])
def test_malformed_challenge(nonce_len):
    async def go():
        async def fake_broker(reader, writer):
            await reader.read(1024)
            writer.write(codec.encode_packet(codec.Auth(0x18, codec.auth_properties("SMOKER", bytes(nonce_len)))))
            await writer.drain()
            await reader.read(1024)
            writer.close()

        server = await asyncio.start_server(fake_broker, "127.0.0.1", 0)
        port = server.sockets[0].getsockname()[1]
        try:
            c = Client(keygen()[0], "127.0.0.1", port, keep_alive=0, timeout=2.0)
            with pytest.raises(MalformedChallenge):
                await c.connect()
            assert c.last_proof is None
        finally:
            server.close()
            await server.wait_closed()

    run(go())


def test_pubsub(broker):
    async def go():
        sub = make_client(broker)
        pub = make_client(broker)
        await sub.connect()
        ack = await sub.subscribe("a/b", "c")
        assert ack.reason_codes == (0, 0)
        await pub.connect()
        await pub.publish("a/b", "hello")
        await pub.publish("c", b"\x00\x01")
        it = sub.messages()
        first = await it.__anext__()
        second = await it.__anext__()
        await pub.disconnect()
        await sub.disconnect()
        return first, second

    first, second = run(go())
    assert (first.topic, first.payload) == ("a/b", b"hello")
    assert (second.topic, second.payload) == ("c", b"\x00\x01")


def test_eviction_observed_by_client(broker):
    async def go():
        key = keygen()[0]
        a = make_client(broker, key)
        b = make_client(broker, key)
        await a.connect()
        await b.connect()
        msgs = [m async for m in a.messages()]
        await b.disconnect()
        await a.close()
        return msgs, a.disconnect_reason

    msgs, reason = run(go())
    assert msgs == [] and reason == 0x83


def test_from_config(tmp_path, broker):
    key = keygen()[0]
    sigscheme.save_key(key, tmp_path / "k")
    cfg = ClientConfig(f"127.0.0.1:{broker.port}", tmp_path / "k", keep_alive=0)
    c = Client.from_config(cfg)
    assert c.client_id == derive_client_id(derive_public_key(key))
    run(c.connect())
