"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Run with:  pytest tests/test_acceptance.py -v -s
"""

from __future__ import annotations

import base64
import http.client
import json
import random
import sqlite3
import statistics
import threading
import time
from pathlib import Path

import pytest
import requests

from dsgate.gateway import RouteKey
from dsgate.loadgen import run_load
from dsgate.model import RateLimitPolicy, ServerConfig, parse_project_file, parse_server_config
from dsgate.providers.mock import MockProvider
from dsgate.server import serve
from dsgate.templates import RAW, BindVariable, QueryTemplate, extract_bind_variables, substitute

from .support import (
    GatewayBundle,
    make_param_values,
    reference_substitute_raw,
    sample_project_doc,
    template_corpus,
)

FIXTURES = Path(__file__).parent / "fixtures"


def _pass(name: str) -> None:
    print(f"\nACCEPTANCE PASS: {name}")


def _seed_records(path: str, rows: int) -> None:
    conn = sqlite3.connect(path)
    conn.execute("CREATE TABLE records (id INTEGER PRIMARY KEY, name TEXT, flag INT)")
    conn.executemany(
        "INSERT INTO records (name, flag) VALUES (?, ?)",
        [(f"row-{i}", i % 2) for i in range(rows)],
    )
    conn.commit()
    conn.close()


def _count_project(db_path: str) -> dict:
    return {
        "name": "bench",
        "profiles": {
            "db": {
                "providerId": "embedded-sql",
                "dataSource": {"path": db_path},
                "queryEndpoints": {
                    "count": {"queryTemplate": "SELECT COUNT(*) AS c FROM records"}
                },
            }
        },
    }


def _secured_config(tmp_path, **overrides) -> ServerConfig:
    base = dict(
        host="127.0.0.1",
        service_port=0,
        console_port=0,
        enable_authentication=True,
        authentication_protocol="api_key",
        audit_mode="buffered",
        audit_flush_seconds=0.2,
        store_path=str(tmp_path / "store.db"),
        log_directory=str(tmp_path / "logs"),
    )
    base.update(overrides)
    return ServerConfig(**base)


DATASET_ROWS = 50_000


def test_c1_concurrency_soundness(tmp_path):
    """100 users / 10s ramp / 10,000 requests against a COUNT(*) query on
    >=50,000 rows: zero transport errors, zero non-200s, exactly 10,000
    audit records, in under two minutes."""
    db = str(tmp_path / "big.db")
    _seed_records(db, DATASET_ROWS)
    config = _secured_config(tmp_path)
    project = parse_project_file(json.dumps(_count_project(db)))
    with serve(config, projects=[project]) as handle:
        key, _ = handle.security.issue_api_key("loadgen", set(), 3600)
        target = (
            f"http://127.0.0.1:{handle.service_port}/services/bench/db/query/count"
        )
        started = time.monotonic()
        report = run_load(
            target,
            users=100,
            rampup_seconds=10.0,
            total_requests=10_000,
            headers={"api_key": key},
        )
        elapsed = time.monotonic() - started

        assert report.completed == 10_000
        assert report.transport_errors == 0, f"{report.transport_errors} transport errors"
        assert report.non_200 == 0, f"{report.non_200} unexpected non-200s"
        assert elapsed < 120, f"took {elapsed:.1f}s"

        handle.store.flush_audit()
        assert handle.store.count_audit() == 10_000
    _pass(
        f"concurrency soundness (10,000/10,000 ok in {elapsed:.1f}s, "
        f"{report.throughput_rps:.0f} req/s, audit=10,000)"
    )


def test_c2_overhead_bound(tmp_path):
    """Median gateway latency minus median direct in-process execution of the
    identical SQL is <= 5 ms on loopback (1,000 samples each, auth enabled,
    audit buffered)."""
    db = str(tmp_path / "big.db")
    _seed_records(db, DATASET_ROWS)
    config = _secured_config(tmp_path)
    project = parse_project_file(json.dumps(_count_project(db)))
    sql = "SELECT COUNT(*) AS c FROM records"

    with serve(config, projects=[project]) as handle:
        key, _ = handle.security.issue_api_key("bench", set(), 3600)

        direct = sqlite3.connect(db)
        direct_samples = []
        for _ in range(1000):
            t0 = time.perf_counter()
            direct.execute(sql).fetchall()
            direct_samples.append((time.perf_counter() - t0) * 1e6)
        direct.close()

        conn = http.client.HTTPConnection("127.0.0.1", handle.service_port)
        gateway_samples = []
        for _ in range(1000):
            t0 = time.perf_counter()
            conn.request(
                "GET", "/services/bench/db/query/count", headers={"api_key": key}
            )
            response = conn.getresponse()
            body = response.read()
            gateway_samples.append((time.perf_counter() - t0) * 1e6)
            assert response.status == 200
        conn.close()
        assert json.loads(body) == [{"c": DATASET_ROWS}]

    direct_median = statistics.median(direct_samples)
    gateway_median = statistics.median(gateway_samples)
    overhead_ms = (gateway_median - direct_median) / 1000
    assert overhead_ms <= 5.0, f"overhead {overhead_ms:.2f} ms exceeds 5 ms"
    _pass(
        f"overhead bound (direct {direct_median/1000:.2f} ms, gateway "
        f"{gateway_median/1000:.2f} ms, overhead {overhead_ms:.2f} ms <= 5 ms)"
    )


def test_c3_paper_fixture_round_trip(tmp_path):
    """The published project-file and configuration listings parse without
    modification, the server boots from them, and the submit endpoint is
    routable at POST /services/{project}/Provider1/submit/UploadEmployeeDetails."""
    config = parse_server_config((FIXTURES / "server_config.json").read_bytes())
    assert config.service_port == 9099
    assert config.authentication_protocol == "jwt"

    project = parse_project_file(
        (FIXTURES / "employee_project.json").read_bytes(), name="employees"
    )
    assert "UploadEmployeeDetails" in project.profiles["Provider1"].submit_endpoints

    from dataclasses import replace

    boot_config = replace(
        config,
        store_path=str(tmp_path / "store.db"),
        log_directory=str(tmp_path / "logs"),
    )
    from dsgate.providers import builtin_registry

    providers = builtin_registry()
    providers.register(MockProvider(provider_id="MongoDBProvider"))
    with serve(boot_config, projects=[project], providers=providers) as handle:
        assert handle.service_port == 9099
        assert handle.console_port == 9100

        key = handle.gateway.route(
            "POST", "/services/employees/Provider1/submit/UploadEmployeeDetails"
        )
        assert key == RouteKey("employees", "Provider1", "submit", "UploadEmployeeDetails")

        # routable over the wire: auth challenges (401), not 404/405
        response = requests.post(
            "http://127.0.0.1:9099/services/employees/Provider1/submit/UploadEmployeeDetails",
            data=b"a,b\n",
            timeout=5,
        )
        assert response.status_code == 401
        missing = requests.post(
            "http://127.0.0.1:9099/services/employees/Provider1/submit/NoSuch",
            timeout=5,
        )
        assert missing.status_code == 404
    _pass("paper-fixture round trip (config 9099/jwt boots; submit endpoint routable)")


def test_c4_bind_variable_suite(tmp_path):
    """The patientID example end-to-end plus the extract/substitute laws over
    >= 1,000 generated templates."""
    db = str(tmp_path / "patients.db")
    conn = sqlite3.connect(db)
    conn.execute("CREATE TABLE PATIENT_TABLE (PATIENT_ID INT, NAME TEXT)")
    conn.executemany(
        "INSERT INTO PATIENT_TABLE VALUES (?, ?)",
        [(i, f"patient-{i}") for i in range(1, 101)],
    )
    conn.commit()

    doc = sample_project_doc(db)
    with GatewayBundle(project_docs=[doc]) as bundle:
        outcome = bundle.request("GET", "/services/p1/db/query/getPatient?patientID=42")
        assert outcome.status == 200
        rows = json.loads(outcome.body)
        assert len(rows) == 1
        assert rows[0]["PATIENT_ID"] == 42
        oracle = conn.execute(
            "SELECT COUNT(*) FROM PATIENT_TABLE WHERE PATIENT_ID = 42"
        ).fetchone()[0]
        assert oracle == 1
    conn.close()

    corpus = template_corpus(1000, seed=7)
    assert len(corpus) == 1000
    rng = random.Random(41)
    for text, names in corpus:
        template = QueryTemplate(text, tuple(BindVariable(n) for n in names))
        values = make_param_values(rng, names)
        full = {n: values.get(n, "") for n in names}

        # law 1: extraction equals the substitution domain
        bound = substitute(template, full, RAW)
        assert set(bound.applied_params) == set(extract_bind_variables(text))

        # law 2: byte fidelity outside placeholders (reference implementation)
        assert bound.text.encode() == reference_substitute_raw(text, full).encode()

    # law 3: escape halving
    for count in range(0, 64):
        assert substitute(QueryTemplate("$$" * count), {}, RAW).text == "$" * count
    _pass("bind-variable suite (patientID end-to-end; laws over 1,000 templates)")


def test_c5_pipeline_order_invariant(tmp_path):
    """1,000 randomized requests across mock and embedded-SQL providers all
    produce stage traces matching the fixed pipeline pattern; rejected
    requests never reach provider-execute."""
    db = str(tmp_path / "p.db")
    _seed_records(db, 100)
    doc = sample_project_doc()
    doc["profiles"]["db"]["dataSource"] = {"path": db}
    doc["profiles"]["db"]["queryEndpoints"] = {
        "decorated": {
            "queryTemplate": "SELECT COUNT(*) AS c FROM records WHERE id < $q$",
            "bindVariables": [{"name": "q", "typeHint": "integer"}],
            "queryModifiers": [{"modifierId": "identity"}],
            "resultModifiers": [{"modifierId": "identity"}],
        }
    }
    doc["profiles"]["mock"]["queryEndpoints"]["decorated"] = {
        "queryTemplate": "q=$q$",
        "bindVariables": [{"name": "q"}],
        "queryModifiers": [{"modifierId": "identity"}],
        "resultModifiers": [{"modifierId": "identity"}],
    }
    doc["profiles"]["mock"]["queryEndpoints"]["guarded"] = {
        "queryTemplate": "p=$p$",
        "bindVariables": [{"name": "p"}],
        "queryModifiers": [
            {
                "modifierId": "role-filter",
                "config": {"attribute": "p", "roleMap": "{}"},
            }
        ],
    }

    def matches(stages: list[str], kind: str) -> bool:
        i = 0
        while i < len(stages) and stages[i] == "payload":
            if kind != "submit":
                return False
            i += 1
        while i < len(stages) and stages[i] == "query":
            i += 1
        if i >= len(stages) or stages[i] != "execute":
            return False
        i += 1
        while i < len(stages) and stages[i] == "result":
            i += 1
        return i == len(stages)

    rng = random.Random(4242)
    rejected_seen = 0
    with GatewayBundle(project_docs=[doc]) as bundle:
        for i in range(1000):
            choice = rng.randrange(5)
            if choice == 0:
                outcome = bundle.request("GET", f"/services/p1/mock/query/decorated?q={i}")
                expected, kind = 200, "query"
            elif choice == 1:
                outcome = bundle.request("GET", f"/services/p1/db/query/decorated?q={i}")
                expected, kind = 200, "query"
            elif choice == 2:
                outcome = bundle.request("POST", "/services/p1/mock/submit/submitEcho", body=b"x")
                expected, kind = 200, "submit"
            elif choice == 3:
                outcome = bundle.request("PUT", "/services/p1/mock/update/touch")
                expected, kind = 200, "update"
            else:
                outcome = bundle.request("GET", f"/services/p1/mock/query/guarded?p={i}")
                expected, kind = 403, "query"
            assert outcome.status == expected, outcome.body
            stages = [stage for _, stage in outcome.stage_trace]
            if expected == 403:
                rejected_seen += 1
                assert "execute" not in stages
            else:
                assert matches(stages, kind), (kind, stages)
    assert rejected_seen > 100
    _pass(
        f"pipeline-order invariant (1,000 requests; {rejected_seen} rejections "
        "without provider-execute)"
    )


def test_c6_security_suite(tmp_path, rsa_keypair):
    """Missing/invalid/expired/revoked credentials give 401; disjoint roles
    403; a 5-per-60s policy allows exactly 5 then 429 with Retry-After; a JWT
    bit-flip gives 401; issued keys and JWTs round-trip."""
    doc = sample_project_doc()
    doc["profiles"]["mock"]["queryEndpoints"]["adminOnly"] = {
        "queryTemplate": "secret",
        "visibility": {"allowedRoles": ["admin"]},
    }
    config = ServerConfig(
        host="127.0.0.1",
        service_port=0,
        console_port=1,
        enable_authentication=True,
        enable_authorization=True,
        authentication_protocol="api_key",
        audit_mode="durable",
        rate_limit=RateLimitPolicy(requests_per_window=5, window_seconds=60),
    )
    url = "/services/p1/mock/query/echo?msg=x"
    with GatewayBundle(config=config, project_docs=[doc]) as bundle:
        assert bundle.request("GET", url).status == 401  # missing
        assert bundle.request("GET", url, headers={"api_key": "bogus"}).status == 401

        expired_key, _ = bundle.security.issue_api_key("old", set(), 0)
        assert bundle.request("GET", url, headers={"api_key": expired_key}).status == 401

        revoked_key, record = bundle.security.issue_api_key("gone", set(), 3600)
        bundle.security.revoke_api_key(record.fingerprint)
        assert bundle.request("GET", url, headers={"api_key": revoked_key}).status == 401

        # api-key round trip + exact rate conservation
        key, _ = bundle.security.issue_api_key("alice", {"api_user"}, 3600)
        statuses = [
            bundle.request("GET", url, headers={"api_key": key}).status
            for _ in range(7)
        ]
        assert statuses[:5] == [200] * 5
        assert statuses[5:] == [429, 429]
        throttled = bundle.request("GET", url, headers={"api_key": key})
        assert "Retry-After" in throttled.headers

        # disjoint roles: 403 (fresh principal to dodge the rate limit)
        user_key, _ = bundle.security.issue_api_key("bob", {"api_user"}, 3600)
        denied = bundle.request(
            "GET", "/services/p1/mock/query/adminOnly", headers={"api_key": user_key}
        )
        assert denied.status == 403

    # jwt: round trip and bit-flip
    private_pem, public_pem = rsa_keypair
    jwt_config = ServerConfig(
        host="127.0.0.1",
        service_port=0,
        console_port=1,
        enable_authentication=True,
        authentication_protocol="jwt",
        audit_mode="durable",
    )
    bundle = GatewayBundle(config=jwt_config, project_docs=[sample_project_doc()])
    try:
        from dsgate.security import SecurityService

        bundle.security = SecurityService(
            jwt_config,
            bundle.store,
            private_key_pem=private_pem,
            public_key_pem=public_pem,
        )
        bundle.gateway.security = bundle.security
        token = bundle.security.issue_jwt("carol", {"api_user"}, 600)
        ok = bundle.request(
            "GET", url, headers={"Authorization": f"Bearer {token}"}
        )
        assert ok.status == 200
        assert ok.subject == "carol"

        header, payload, signature = token.split(".")
        raw = bytearray(base64.urlsafe_b64decode(payload + "=" * (-len(payload) % 4)))
        raw[8] ^= 0x01
        flipped = base64.urlsafe_b64encode(bytes(raw)).rstrip(b"=").decode()
        bad = bundle.request(
            "GET", url, headers={"Authorization": f"Bearer {header}.{flipped}.{signature}"}
        )
        assert bad.status == 401
    finally:
        bundle.close()
    _pass("security suite (401s, 403, exact 5-then-429 with Retry-After, JWT bit-flip)")


def test_c7_hot_reload(tmp_path):
    """A disk edit changes served behavior within 5 s with zero dropped
    in-flight requests and unchanged process uptime; a malformed edit leaves
    the prior version fully servable."""
    project_dir = tmp_path / "projects"
    project_dir.mkdir()
    (project_dir / "p1.json").write_text(json.dumps(sample_project_doc()))
    config = ServerConfig(
        host="127.0.0.1",
        service_port=0,
        console_port=0,
        enable_authentication=False,
        audit_mode="durable",
        store_path=str(tmp_path / "s.db"),
        log_directory=str(tmp_path / "logs"),
    )
    with serve(config, project_dir=project_dir, watch_poll_seconds=0.25) as handle:
        base = f"http://127.0.0.1:{handle.service_port}"
        url = f"{base}/services/p1/mock/query/echo?msg=x"
        assert requests.get(url, timeout=5).json() == [{"echo": "msg=x"}]
        started_at = handle.started_at

        stop = threading.Event()
        failures: list[int] = []

        def hammer():
            session = requests.Session()
            while not stop.is_set():
                response = session.get(url, timeout=5)
                if response.status_code != 200:
                    failures.append(response.status_code)

        threads = [threading.Thread(target=hammer) for _ in range(4)]
        for t in threads:
            t.start()

        doc = sample_project_doc()
        doc["profiles"]["mock"]["queryEndpoints"]["echo"]["queryTemplate"] = "v2:$msg$"
        edit_time = time.monotonic()
        (project_dir / "p1.json").write_text(json.dumps(doc))
        switched = None
        while time.monotonic() - edit_time < 5.0:
            if requests.get(url, timeout=5).json() == [{"echo": "v2:x"}]:
                switched = time.monotonic() - edit_time
                break
            time.sleep(0.05)
        stop.set()
        for t in threads:
            t.join()

        assert switched is not None, "edit not visible within 5s"
        assert failures == [], f"dropped/failed requests during reload: {failures}"
        assert handle.started_at == started_at  # uptime unbroken

        # malformed edit: last good version keeps serving
        (project_dir / "p1.json").write_text("{broken")
        time.sleep(1.0)
        assert requests.get(url, timeout=5).json() == [{"echo": "v2:x"}]
    _pass(f"hot reload (visible in {switched:.2f}s; zero dropped; last-good on malformed)")


def test_c8_output_chainer(tmp_path):
    """A two-stage chain over the mock provider returns the inner echo per
    outer row; a self-referential chain terminates with ChainDepthExceeded."""
    db = str(tmp_path / "chain.db")
    conn = sqlite3.connect(db)
    conn.execute("CREATE TABLE items (id INT)")
    conn.executemany("INSERT INTO items VALUES (?)", [(1,), (2,)])
    conn.commit()
    conn.close()

    doc = {
        "name": "wf",
        "profiles": {
            "db": {
                "providerId": "embedded-sql",
                "dataSource": {"path": db},
                "queryEndpoints": {
                    "stageOne": {
                        "queryTemplate": "SELECT id FROM items ORDER BY id",
                        "resultModifiers": [
                            {
                                "modifierId": "output-chainer",
                                "config": {
                                    "nextProject": "wf",
                                    "nextProvider": "mock",
                                    "nextEndpoint": "stageTwo",
                                    "paramField": "id",
                                },
                            }
                        ],
                    }
                },
            },
            "mock": {
                "providerId": "mock",
                "queryEndpoints": {
                    "stageTwo": {
                        "queryTemplate": "$id$",
                        "bindVariables": [{"name": "id"}],
                    },
                    "selfloop": {
                        "queryTemplate": "$echo$",
                        "bindVariables": [{"name": "echo"}],
                        "resultModifiers": [
                            {
                                "modifierId": "output-chainer",
                                "config": {
                                    "nextProject": "wf",
                                    "nextProvider": "mock",
                                    "nextEndpoint": "selfloop",
                                    "paramField": "echo",
                                },
                            }
                        ],
                    },
                },
            },
        },
    }
    with GatewayBundle(project_docs=[doc]) as bundle:
        outcome = bundle.request("GET", "/services/wf/db/query/stageOne")
        assert outcome.status == 200
        assert json.loads(outcome.body) == [{"echo": "1"}, {"echo": "2"}]

        loop = bundle.request("GET", "/services/wf/mock/query/selfloop?echo=9")
        assert loop.status == 500
        body = json.loads(loop.body)
        assert body["error"] == "ChainDepthExceeded"
        assert "4" in body["detail"]
    _pass("output chainer (two-stage echo per row; self-chain stops at depth 4)")
