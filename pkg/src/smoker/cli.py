"""Command line entry points: smoker-id, smoker-broker, smoker-client, smoker-harness."""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import signal
import sys
import time
from pathlib import Path

from . import client as client_mod
from .broker import DEFAULT_AUTH_TIMEOUT, BackgroundBroker, Broker, serve
from .client import ClientConfig, ClientError, TransportError, parse_address
from .identity import InvalidClientId, decode_client_id, derive_client_id
from .nonce import TEST_SEED, NonceService
from .sigscheme import derive_public_key, keygen, load_key, save_key

EXIT_OK, EXIT_ERROR, EXIT_AUTH, EXIT_TRANSPORT = 0, 1, 2, 3


def _setup_logging(level: str) -> None:
    logging.basicConfig(level=level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")


# -- smoker-id --------------------------------------------------------------


def id_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="smoker-id", description="Key and clientID utilities.")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("keygen", help="write a new signing key file")
    p.add_argument("--out", required=True, type=Path)
    p = sub.add_parser("derive", help="print the clientID for a key file")
    p.add_argument("--key", required=True, type=Path)
    p = sub.add_parser("decode", help="print the public key encoded in a clientID")
    p.add_argument("client_id")
    args = parser.parse_args(argv)

    if args.cmd == "keygen":
        sk, pk = keygen()
        save_key(sk, args.out)
        print(derive_client_id(pk))
    elif args.cmd == "derive":
        print(derive_client_id(derive_public_key(load_key(args.key))))
    else:
        try:
            print(decode_client_id(args.client_id).pk.hex())
        except InvalidClientId as exc:
            print(f"invalid clientID: {exc}", file=sys.stderr)
            return EXIT_ERROR
    return EXIT_OK


# -- smoker-broker ----------------------------------------------------------


def broker_main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in ("serve", "dump", "-h", "--help"):
        argv.insert(0, "serve")
    parser = argparse.ArgumentParser(prog="smoker-broker", description="MQTT 5.0 broker with SMOKER authentication.")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("serve", help="run the broker (default)")
    p.add_argument("--listen", default="0.0.0.0:1883", help="address:port to bind")
    p.add_argument("--seed-file", type=Path, help="32-byte hex seed for the nonce generator")
    p.add_argument("--auth-timeout-secs", type=float, default=DEFAULT_AUTH_TIMEOUT)
    p.add_argument("--test-mode", action="store_true", help="fixed nonce seed when no seed file is given")
    p.add_argument("--dump-path", type=Path, help="where SIGUSR1 writes the registry (default stdout)")
    p.add_argument("--log-level", default="info")
    p = sub.add_parser("dump", help="ask a running broker to write its session registry")
    p.add_argument("--pid", type=int, required=True)
    p.add_argument("--dump-path", type=Path, help="file the broker writes to; printed when it appears")
    p.add_argument("--wait-secs", type=float, default=5.0)
    args = parser.parse_args(argv)

    if args.cmd == "dump":
        return _request_dump(args.pid, args.dump_path, args.wait_secs)

    _setup_logging(args.log_level)
    if args.seed_file:
        nonces = NonceService.from_seed_file(args.seed_file)
    elif args.test_mode:
        nonces = NonceService(TEST_SEED)
    else:
        nonces = NonceService()
    broker = Broker(nonces, auth_timeout=args.auth_timeout_secs)
    host, port = parse_address(args.listen)

    def write_dump() -> None:
        text = broker.dump()
        if args.dump_path:
            tmp = args.dump_path.with_suffix(".tmp")
            tmp.write_text(text)
            tmp.replace(args.dump_path)
        else:
            sys.stdout.write(text)
            sys.stdout.flush()

    async def main() -> None:
        server = await serve(broker, host, port)
        loop = asyncio.get_running_loop()
        if hasattr(signal, "SIGUSR1"):
            loop.add_signal_handler(signal.SIGUSR1, write_dump)
        logging.getLogger("smoker.broker").info("listening on %s:%d", host, port)
        async with server:
            await server.serve_forever()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def _request_dump(pid: int, path: Path | None, wait: float) -> int:
    before = path.stat().st_mtime_ns if path and path.exists() else None
    os.kill(pid, signal.SIGUSR1)
    if path is None:
        return EXIT_OK
    deadline = time.monotonic() + wait
    while time.monotonic() < deadline:
        if path.exists() and path.stat().st_mtime_ns != before:
            sys.stdout.write(path.read_text())
            return EXIT_OK
        time.sleep(0.05)
    print(f"broker did not write {path}", file=sys.stderr)
    return EXIT_ERROR


# -- smoker-client ----------------------------------------------------------


def client_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="smoker-client", description="SMOKER-authenticated MQTT client.")
    parser.add_argument("--key", required=True, type=Path)
    parser.add_argument("--broker", default="127.0.0.1:1883")
    parser.add_argument("--keep-alive", type=int, default=60)
    parser.add_argument("--timeout", type=float, default=5.0)
    parser.add_argument("--log-level", default="warning")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("pub", help="publish one message")
    p.add_argument("topic")
    p.add_argument("message")
    p = sub.add_parser("sub", help="print 'topic<TAB>payload' for each message")
    p.add_argument("topic", nargs="+")
    p.add_argument("--count", type=int, default=0, help="exit after this many messages")
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)

    cfg = ClientConfig(args.broker, args.key, keep_alive=args.keep_alive, timeout=args.timeout)

    async def run() -> None:
        c = client_mod.Client.from_config(cfg)
        await c.connect()
        try:
            if args.cmd == "pub":
                await c.publish(args.topic, args.message)
                return
            await c.subscribe(*args.topic)
            seen = 0
            async for msg in c.messages():
                sys.stdout.write(f"{msg.topic}\t{msg.payload.decode(errors='replace')}\n")
                sys.stdout.flush()
                seen += 1
                if args.count and seen >= args.count:
                    return
            if c.disconnect_reason is not None:
                raise ClientError(f"disconnected by broker, reason {c.disconnect_reason:#04x}")
            raise TransportError("connection closed")
        finally:
            await c.disconnect()

    try:
        asyncio.run(run())
    except TransportError as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except ClientError as exc:
        print(f"authentication failure: {exc}", file=sys.stderr)
        return EXIT_AUTH
    except KeyboardInterrupt:
        pass
    return EXIT_OK


# -- smoker-harness ---------------------------------------------------------


def harness_main(argv: list[str] | None = None) -> int:
    from . import harness

    parser = argparse.ArgumentParser(prog="smoker-harness", description="Run adversary scenarios against a broker.")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("run")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--broker", help="address:port of a running broker")
    target.add_argument("--local", action="store_true", help="start a test-mode broker in-process")
    p.add_argument("--scenario", action="append", help="scenario name (repeatable; default all)")
    p.add_argument("--transcript-dir", type=Path)
    p.add_argument("--timeout", type=float, default=2.0)
    p.add_argument("--log-level", default="error")
    sub.add_parser("list")
    args = parser.parse_args(argv)

    if args.cmd == "list":
        for s in harness.builtin_scenarios():
            print(f"{s.name}\t{s.description}")
        return EXIT_OK

    _setup_logging(args.log_level)
    local = None
    try:
        if args.local:
            local = BackgroundBroker(Broker(NonceService(TEST_SEED))).start()
            address = local.address
            dump = local.broker.dump
        else:
            address = parse_address(args.broker)
            dump = None
        try:
            verdicts = harness.run_scenarios(
                address, args.scenario, args.transcript_dir, timeout=args.timeout, registry_dump=dump
            )
        except KeyError as exc:
            print(f"unknown scenario {exc}", file=sys.stderr)
            return EXIT_ERROR
        except harness.BrokerUnreachable as exc:
            print(f"broker unreachable: {exc}", file=sys.stderr)
            return EXIT_TRANSPORT
    finally:
        if local is not None:
            local.stop()
    for v in verdicts:
        print(v)
    return EXIT_OK if all(v.passed for v in verdicts) else EXIT_ERROR
