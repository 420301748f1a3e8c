"""Command-line entry points.

``chiron-server`` runs the host service; ``chiron-provider`` and
``chiron-holder`` are thin clients over the wire protocol; ``chiron-audit``
runs the adversarial scenario suite.

Client exit codes: 0 success, 2 protocol error, 3 attestation failure,
4 policy denial, 1 local usage or input error.
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .client import (
    ClientError,
    HolderClient,
    ProtocolFailure,
    ProviderClient,
    SocketTransport,
)
from .datasets import load_csv
from .enclave import Measurement, Platform, load_or_create_root_key, load_root_public_key, measure
from .runtime import runtime_image
from .sandbox import ConfigRejected, encode_config, validate_config
from .service import ChironServer, Deployment
from .wire import TICKET_SIZE

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PROTOCOL = 2
EXIT_ATTESTATION = 3
EXIT_POLICY = 4

ENV_SEED = "CHIRON_SEED"
ENV_ROOT_PUBKEY = "CHIRON_ROOT_PUBKEY"


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _root_pubkey(args: argparse.Namespace) -> bytes:
    path = args.root_pubkey or os.environ.get(ENV_ROOT_PUBKEY)
    if not path:
        raise ValueError(f"--root-pubkey or {ENV_ROOT_PUBKEY} is required")
    return load_root_public_key(path)


def _add_client_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--server", required=True, help="host:port of chiron-server")
    parser.add_argument("--root-pubkey", help=f"platform root public key file (or ${ENV_ROOT_PUBKEY})")
    parser.add_argument("--timeout", type=float, default=60.0, help="socket timeout in seconds")


def _run_client(action) -> int:
    try:
        return action()
    except ClientError as exc:
        return _fail(str(exc), exc.exit_code)
    except OSError as exc:
        return _fail(f"connection: {exc}", EXIT_PROTOCOL)
    except ValueError as exc:
        return _fail(str(exc), EXIT_USAGE)


# -- server -----------------------------------------------------------------

def server_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="chiron-server", description=__doc__.splitlines()[0])
    parser.add_argument("--listen", default="127.0.0.1:7878", help="addr:port (port 0 picks one)")
    parser.add_argument("--root-key", required=True,
                        help="platform root key file, created if missing; writes <path>.pub")
    parser.add_argument("--trainers", type=int, default=1, help="trainer enclaves per job (1-16)")
    parser.add_argument("--print-measurement", action="store_true",
                        help="print the runtime measurement and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    if args.print_measurement:
        print(measure(runtime_image()).hex())
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    host, _, port = args.listen.rpartition(":")
    try:
        deployment = Deployment(Platform(load_or_create_root_key(args.root_key)),
                                trainers=args.trainers)
    except (OSError, ValueError) as exc:
        return _fail(str(exc), EXIT_USAGE)
    server = ChironServer(deployment, host or "127.0.0.1", int(port))

    async def serve() -> None:
        bound_host, bound_port = await server.start()
        print(f"measurement {deployment.measurement.hex()}", flush=True)
        print(f"listening {bound_host}:{bound_port}", flush=True)
        await server.serve_forever()

    try:
        asyncio.run(serve())
    except KeyboardInterrupt:
        pass
    finally:
        deployment.shutdown()
    return EXIT_OK


# -- provider ---------------------------------------------------------------

def provider_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="chiron-provider",
                                     description="Provision a model configuration.")
    _add_client_args(parser)
    parser.add_argument("--config", required=True, help="model configuration (JSON)")
    parser.add_argument("--expected-measurement",
                        help="hex measurement (default: the reference runtime build)")
    parser.add_argument("--status", action="store_true",
                        help="after provisioning, report the latest job's status")
    args = parser.parse_args(argv)

    def action() -> int:
        config = validate_config(Path(args.config).read_bytes())
        seed = os.environ.get(ENV_SEED)
        if seed is not None:
            config = config.with_seed(int(seed))
        expected = (Measurement.fromhex(args.expected_measurement) if args.expected_measurement
                    else measure(runtime_image()))
        with ProviderClient(SocketTransport(args.server, args.timeout), expected,
                            _root_pubkey(args)) as client:
            client.attest()
            # a provider session must PROVISION before STATUS; identical bytes are idempotent
            state, epoch = client.provision(encode_config(config))
            if args.status:
                state, epoch = client.status()
        print(f"{state.name} epoch={epoch}")
        return EXIT_OK

    try:
        return _run_client(action)
    except ConfigRejected as exc:
        return _fail(f"config rejected: {exc}", EXIT_POLICY)


# -- holder -----------------------------------------------------------------

def _read_ticket(path: Path) -> bytes:
    try:
        ticket = bytes.fromhex(path.read_text().strip())
    except FileNotFoundError:
        raise ValueError(f"{path}: no job ticket; run 'upload' first") from None
    if len(ticket) != TICKET_SIZE:
        raise ValueError(f"{path}: malformed job ticket")
    return ticket


def _write_ticket(path: Path, ticket: bytes) -> None:
    path.write_text(ticket.hex() + "\n")
    path.chmod(0o600)


def _query_rows(args: argparse.Namespace) -> list[list[float]]:
    if args.query is None:
        return load_csv(args.data).features
    with open(args.query, newline="") as fh:
        return [[float(v) for v in row] for row in csv.reader(fh) if row]


def holder_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="chiron-holder",
                                     description="Upload data, train and query a job.")
    _add_client_args(parser)
    parser.add_argument("--expected-measurement", required=True, help="hex measurement")
    parser.add_argument("--data", required=True, help="training CSV (features..., label)")
    parser.add_argument("--job", help="job ticket file (default: <data>.job)")
    parser.add_argument("--query", help="query CSV of feature rows (default: rows of --data)")
    parser.add_argument("--wait", action="store_true", help="train/query: wait for the job")
    parser.add_argument("--wait-timeout", type=float, default=600.0)
    parser.add_argument("command", choices=("upload", "train", "status", "query"))
    args = parser.parse_args(argv)
    job_file = Path(args.job or f"{args.data}.job")

    def action() -> int:
        expected = Measurement.fromhex(args.expected_measurement)
        ticket = None if args.command == "upload" else _read_ticket(job_file)
        dataset = load_csv(args.data) if args.command == "upload" else None
        rows = _query_rows(args) if args.command == "query" else None
        transport = SocketTransport(args.server, args.timeout)
        with HolderClient(transport, expected, _root_pubkey(args),
                          **({"ticket": ticket} if ticket else {})) as client:
            client.attest()
            if args.command == "upload":
                status = client.upload(dataset)
                _write_ticket(job_file, client.ticket)
                print(f"job {status.job_id.hex()} {status.state.name} rows={dataset.n_rows}")
            elif args.command == "train":
                status = client.start_train()
                if args.wait:
                    status = client.wait(args.wait_timeout)
                print(f"{status.state.name} epoch={status.epoch}")
                if status.state.name == "FAILED":
                    raise ProtocolFailure("job failed")
            elif args.command == "status":
                status = client.status()
                print(f"{status.state.name} epoch={status.epoch}")
            else:
                if args.wait:
                    client.wait(args.wait_timeout)
                for cls in client.query(rows):
                    print(cls)
        return EXIT_OK

    return _run_client(action)


# -- audit ------------------------------------------------------------------

def audit_main(argv: list[str] | None = None) -> int:
    from .audit import run_all

    parser = argparse.ArgumentParser(prog="chiron-audit",
                                     description="Run the adversarial scenario suite.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run-all", help="run every scenario (and the mutation check)")
    run.add_argument("--json", action="store_true", help="machine-readable report on stdout")
    run.add_argument("--no-mutations", action="store_true", help="skip mutation testing")
    args = parser.parse_args(argv)

    report = run_all(mutations=not args.no_mutations)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        for s in report["scenarios"]:
            print(f"{s['verdict']:8} {s['adversary']:8} {s['name']}: {s['evidence']}")
        for m in report.get("mutations", []):
            status = "detected" if m["detected_by"] else "MISSED"
            print(f"mutation {m['name']}: {status} by {', '.join(m['detected_by']) or '-'}")
    return EXIT_OK if report["ok"] else EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(holder_main())
