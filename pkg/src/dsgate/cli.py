"""Process entry points: server launcher, key tooling, load harness."""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading
import time
from pathlib import Path

import requests

from .errors import GatewayError, MalformedDocument, NotFound, SchemaViolation
from .loadgen import probe_reachable, run_load
from .model import parse_server_config
from .security import SecurityService
from .server import serve
from .store import Store


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsgate",
        description="Data-services gateway: declarative REST APIs over data stores",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    serve_cmd = commands.add_parser("serve", help="run the gateway")
    serve_cmd.add_argument("--config", required=True, help="server config JSON path")
    serve_cmd.add_argument("--projects", help="directory of project files (hot reloaded)")
    serve_cmd.add_argument("--log-dir", help="override the access log directory")
    serve_cmd.add_argument("--console-assets", help="static web console directory")

    keytool = commands.add_parser("keytool", help="manage API keys")
    keytool.add_argument("--store", help="store file path (offline mode)")
    keytool.add_argument("--url", help="console base URL (online mode)")
    keytool.add_argument("--api-key", help="admin credential for online mode")
    key_actions = keytool.add_subparsers(dest="action", required=True)
    issue = key_actions.add_parser("issue")
    issue.add_argument("--subject", required=True)
    issue.add_argument("--roles", default="", help="comma-separated role list")
    issue.add_argument("--ttl", type=int, default=3600, help="seconds until expiry")
    revoke = key_actions.add_parser("revoke")
    revoke.add_argument("--fingerprint", required=True)
    key_actions.add_parser("list")

    loadgen = commands.add_parser("loadgen", help="concurrent load harness")
    loadgen.add_argument("--target", required=True, help="full URL to hammer")
    loadgen.add_argument("--users", type=int, default=100)
    loadgen.add_argument("--rampup", type=float, default=10.0, help="ramp-up seconds")
    loadgen.add_argument("--requests", type=int, default=10_000, dest="total")
    loadgen.add_argument("--report", help="write the per-second CSV here")
    loadgen.add_argument("--api-key", help="credential sent as the api_key header")

    return parser


# --- serve ---------------------------------------------------------------------

def _serve_command(args) -> int:
    config_path = Path(args.config)
    if not config_path.is_file():
        print(f"error: config file not found: {config_path}", file=sys.stderr)
        return 2
    try:
        config = parse_server_config(config_path.read_bytes())
    except (MalformedDocument, SchemaViolation) as exc:
        print(f"error: bad config {config_path}: {exc}", file=sys.stderr)
        return 2

    if args.log_dir:
        from dataclasses import replace

        config = replace(config, log_directory=args.log_dir)

    try:
        handle = serve(
            config,
            project_dir=args.projects,
            console_assets=args.console_assets,
        )
    except GatewayError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    audit_mode = config.audit_mode if config.enable_audit else "disabled"
    auth = config.authentication_protocol if config.enable_authentication else "disabled"
    print(f"dsgate {config.instance_name}")
    print(f"  services: {config.host}:{handle.service_port}")
    print(f"  console:  {config.host}:{handle.console_port}")
    print(f"  auth: {auth}  audit: {audit_mode}")
    print(f"  projects: {', '.join(handle.registry.names()) or '(none)'}")
    sys.stdout.flush()

    stop = threading.Event()

    def _on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, _on_signal)
    signal.signal(signal.SIGINT, _on_signal)
    try:
        while not stop.wait(0.5):
            pass
    finally:
        print("draining and shutting down ...")
        handle.shutdown()
    return 0


# --- keytool ----------------------------------------------------------------------

def _keytool_offline(args) -> int:
    store = Store(args.store)
    try:
        if args.action == "issue":
            from .model import ServerConfig

            config = ServerConfig(host="127.0.0.1", service_port=0, console_port=1)
            service = SecurityService(config, store)
            roles = {r.strip() for r in args.roles.split(",") if r.strip()}
            key, record = service.issue_api_key(args.subject, roles, args.ttl)
            print(f"api key (shown once): {key}")
            print(f"fingerprint: {record.fingerprint}")
        elif args.action == "revoke":
            store.revoke_api_key(args.fingerprint)
            print(f"revoked {args.fingerprint}")
        else:
            keys = store.list_api_keys()
            if not keys:
                print("(no keys)")
            for record in keys:
                state = "revoked" if record.revoked else "active"
                print(
                    f"{record.fingerprint}  {record.subject:<16} {state:<8} "
                    f"expires {time.strftime('%Y-%m-%d %H:%M:%S', time.localtime(record.expires_at))}"
                )
        return 0
    except NotFound as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        store.close()


def _keytool_online(args) -> int:
    headers = {"api_key": args.api_key} if args.api_key else {}
    base = args.url.rstrip("/")
    try:
        if args.action == "issue":
            roles = [r.strip() for r in args.roles.split(",") if r.strip()]
            response = requests.post(
                f"{base}/admin/keys",
                json={"subject": args.subject, "roles": roles, "ttlSeconds": args.ttl},
                headers=headers,
                timeout=10,
            )
            if response.status_code != 200:
                print(f"error: {response.status_code} {response.text}", file=sys.stderr)
                return 1
            body = response.json()
            print(f"api key (shown once): {body['apiKey']}")
            print(f"fingerprint: {body['fingerprint']}")
        elif args.action == "revoke":
            response = requests.delete(
                f"{base}/admin/keys/{args.fingerprint}", headers=headers, timeout=10
            )
            if response.status_code != 200:
                print(f"error: {response.status_code} {response.text}", file=sys.stderr)
                return 1
            print(f"revoked {args.fingerprint}")
        else:
            response = requests.get(f"{base}/admin/keys", headers=headers, timeout=10)
            if response.status_code != 200:
                print(f"error: {response.status_code} {response.text}", file=sys.stderr)
                return 1
            keys = response.json()
            if not keys:
                print("(no keys)")
            for record in keys:
                state = "revoked" if record["revoked"] else "active"
                print(f"{record['fingerprint']}  {record['subject']:<16} {state}")
        return 0
    except requests.RequestException as exc:
        print(f"error: cannot reach {base}: {exc}", file=sys.stderr)
        return 1


def _keytool_command(args) -> int:
    if args.url:
        return _keytool_online(args)
    if not args.store:
        print("error: keytool needs --store (offline) or --url (online)", file=sys.stderr)
        return 2
    return _keytool_offline(args)


# --- loadgen ----------------------------------------------------------------------------

def _loadgen_command(args) -> int:
    if not probe_reachable(args.target):
        print(f"error: target unreachable: {args.target}", file=sys.stderr)
        return 3
    headers = {"api_key": args.api_key} if args.api_key else {}
    report = run_load(
        target=args.target,
        users=args.users,
        rampup_seconds=args.rampup,
        total_requests=args.total,
        headers=headers,
    )
    for line in report.summary_lines():
        print(line)
    if args.report:
        Path(args.report).write_text(report.series_csv())
        print(f"per-second series written to {args.report}")
    return 0 if report.transport_errors == 0 else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "serve":
        return _serve_command(args)
    if args.command == "keytool":
        return _keytool_command(args)
    return _loadgen_command(args)


if __name__ == "__main__":
    sys.exit(main())
