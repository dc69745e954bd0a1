"""Shared test helpers: reference oracles and deterministic generators.

The reference scanner here is intentionally written as a plain index-walking
state machine, independent of the production tokenizer, so the two can
cross-check each other.
"""

from __future__ import annotations

import random
import re
import string

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


def reference_extract(text: str) -> list[str]:
    """Character-level reference scanner for ``$name$`` placeholders.

    Returns distinct names in first-occurrence order, raises ValueError on
    unbalanced delimiters or illegal names.
    """
    names: list[str] = []
    i = 0
    while i < len(text):
        if text[i] != "$":
            i += 1
            continue
        if i + 1 < len(text) and text[i + 1] == "$":
            i += 2
            continue
        j = i + 1
        while j < len(text) and text[j] != "$":
            j += 1
        if j == len(text):
            raise ValueError("unbalanced")
        name = text[i + 1 : j]
        if not _IDENT.match(name):
            raise ValueError("illegal name")
        if name not in names:
            names.append(name)
        i = j + 1
    return names


def reference_substitute_raw(text: str, values: dict[str, str]) -> str:
    """Independent raw-mode substitution used as an oracle."""
    out = []
    i = 0
    while i < len(text):
        if text[i] != "$":
            out.append(text[i])
            i += 1
            continue
        if i + 1 < len(text) and text[i + 1] == "$":
            out.append("$")
            i += 2
            continue
        j = text.index("$", i + 1)
        out.append(values[text[i + 1 : j]])
        i = j + 1
    return "".join(out)


NAME_POOL = ["patientID", "amt", "x", "col_3", "_tag", "Name", "q2", "value"]

_LITERAL_CHARS = string.ascii_letters + string.digits + " =,;()*'\"<>.-%\n\t"


def make_template(rng: random.Random) -> tuple[str, list[str]]:
    """Build one random valid template; returns (text, declared names)."""
    parts: list[str] = []
    names: list[str] = []
    for _ in range(rng.randint(0, 12)):
        choice = rng.random()
        if choice < 0.5:
            parts.append(
                "".join(rng.choice(_LITERAL_CHARS) for _ in range(rng.randint(1, 10)))
            )
        elif choice < 0.65:
            parts.append("$$")
        else:
            name = rng.choice(NAME_POOL)
            parts.append(f"${name}$")
            if name not in names:
                names.append(name)
    return "".join(parts), names


def make_param_values(rng: random.Random, names: list[str]) -> dict[str, str]:
    alphabet = _LITERAL_CHARS + "$"
    return {
        name: "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 8)))
        for name in names
    }


def template_corpus(count: int, seed: int = 7) -> list[tuple[str, list[str]]]:
    """Deterministic corpus of valid templates for the law checks."""
    rng = random.Random(seed)
    return [make_template(rng) for _ in range(count)]


def sample_project_doc(db_path: str = ":memory:") -> dict:
    """One project exercising the mock and embedded-SQL providers."""
    return {
        "name": "p1",
        "profiles": {
            "mock": {
                "providerId": "mock",
                "queryEndpoints": {
                    "echo": {
                        "queryTemplate": "msg=$msg$",
                        "bindVariables": [{"name": "msg"}],
                    },
                },
                "submitEndpoints": {
                    "submitEcho": {"queryTemplate": "submitted"},
                },
                "updateEndpoints": {
                    "touch": {"queryTemplate": "touch"},
                },
                "deleteEndpoints": {
                    "drop": {"queryTemplate": "drop"},
                },
            },
            "db": {
                "providerId": "embedded-sql",
                "dataSource": {"path": db_path},
                "queryEndpoints": {
                    "getPatient": {
                        "queryTemplate": (
                            "SELECT * FROM PATIENT_TABLE WHERE PATIENT_ID = $patientID$"
                        ),
                        "bindVariables": [
                            {"name": "patientID", "typeHint": "integer"}
                        ],
                    },
                    "countPatients": {
                        "queryTemplate": "SELECT COUNT(*) AS c FROM PATIENT_TABLE"
                    },
                },
            },
        },
    }


def seed_patients(db_path: str, count: int = 3) -> None:
    import sqlite3

    conn = sqlite3.connect(db_path)
    conn.execute(
        "CREATE TABLE IF NOT EXISTS PATIENT_TABLE (PATIENT_ID INT, NAME TEXT)"
    )
    conn.executemany(
        "INSERT INTO PATIENT_TABLE VALUES (?, ?)",
        [(i, f"patient-{i}") for i in range(1, count + 1)],
    )
    conn.commit()
    conn.close()


class GatewayBundle:
    """In-process gateway with real registries, store, and security."""

    def __init__(self, config=None, project_docs=None, clock=None):
        import json
        import time

        from dsgate.admin import ProjectRegistry
        from dsgate.gateway import Gateway
        from dsgate.model import ServerConfig, parse_project_file
        from dsgate.modifiers import builtin_modifiers
        from dsgate.providers import builtin_registry
        from dsgate.security import SecurityService
        from dsgate.store import Auditor, Store

        self.config = config or ServerConfig(
            host="127.0.0.1",
            service_port=0,
            console_port=1,
            enable_authentication=False,
            enable_audit=True,
            audit_mode="durable",
        )
        self.store = Store(
            ":memory:",
            audit_mode=self.config.audit_mode,
            instance_name=self.config.instance_name,
            audit_enabled=self.config.enable_audit,
        )
        self.security = SecurityService(
            self.config, self.store, clock=clock or time.time
        )
        self.providers = builtin_registry()
        self.modifiers = builtin_modifiers()
        self.registry = ProjectRegistry(self.providers)
        for doc in project_docs or [sample_project_doc()]:
            self.registry.put(parse_project_file(json.dumps(doc)))
        self.gateway = Gateway(
            config=self.config,
            projects=self.registry,
            providers=self.providers,
            modifiers=self.modifiers,
            security=self.security,
            auditor=Auditor(store=self.store),
        )

    def request(self, method, target, headers=None, body=b""):
        from dsgate.gateway import GatewayRequest

        return self.gateway.handle(
            GatewayRequest.from_parts(
                method, target, headers=headers, body=body, remote_addr="test"
            )
        )

    def close(self):
        self.store.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class StubUpstream:
    """Minimal HTTP upstream recording every request it receives.

    Routes: ``/status/<code>`` responds with that status, ``/echo`` mirrors
    the request body, anything else returns ``[]`` as application/json.
    """

    def __init__(self):
        import http.server
        import threading

        stub = self

        class Handler(http.server.BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):
                pass

            def _serve(self):
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                stub.observed.append(
                    (self.command, self.path, body, dict(self.headers))
                )
                if self.path.startswith("/status/"):
                    code = int(self.path.rsplit("/", 1)[1])
                    payload = b"upstream error"
                    self.send_response(code)
                elif self.path.startswith("/echo"):
                    payload = body
                    self.send_response(200)
                else:
                    payload = b"[]"
                    self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            do_GET = do_POST = do_PUT = do_DELETE = _serve

        self.observed: list[tuple[str, str, bytes, dict]] = []
        self._server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.port = self._server.server_address[1]
        self.base_url = f"http://127.0.0.1:{self.port}"
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def close(self):
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
