"""Durable storage: users, API keys, audit trails, and rolling access logs.

Backing store is a single-file embedded relational database behind this
interface; swap-in of a remote store only needs these methods. Audit
appends funnel through one writer queue so request handlers never block on
storage contention beyond an enqueue; ``flush_seconds`` bounds the loss
window in buffered mode, and ``durable`` mode writes before returning.
"""

from __future__ import annotations

import json
import logging
import logging.handlers
import queue
import sqlite3
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import NotFound, StorageFull

logger = logging.getLogger(__name__)

_SCHEMA = """
CREATE TABLE IF NOT EXISTS users (
    subject TEXT PRIMARY KEY,
    roles TEXT NOT NULL,
    active INTEGER NOT NULL DEFAULT 1,
    created_at REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS api_keys (
    fingerprint TEXT PRIMARY KEY,
    key_hash TEXT NOT NULL UNIQUE,
    subject TEXT NOT NULL,
    roles TEXT NOT NULL,
    issued_at REAL NOT NULL,
    expires_at REAL NOT NULL,
    revoked INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS audit (
    id INTEGER PRIMARY KEY,
    ts REAL NOT NULL,
    subject TEXT NOT NULL,
    method TEXT NOT NULL,
    path TEXT NOT NULL,
    status INTEGER NOT NULL,
    latency_micros INTEGER NOT NULL,
    instance TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS audit_subject ON audit (subject);
CREATE INDEX IF NOT EXISTS audit_ts ON audit (ts);
"""

ACCESS_LOG_MAX_BYTES = 64 * 1024 * 1024
ACCESS_LOG_KEEP = 10


@dataclass(frozen=True)
class UserRecord:
    subject: str
    roles: frozenset[str] = frozenset()
    active: bool = True
    created_at: float = 0.0


@dataclass(frozen=True)
class ApiKeyRecord:
    fingerprint: str
    key_hash: str
    subject: str
    roles: frozenset[str] = frozenset()
    issued_at: float = 0.0
    expires_at: float = 0.0
    revoked: bool = False


@dataclass(frozen=True)
class AuditRecord:
    id: int
    timestamp: float
    subject: str
    method: str
    path: str
    status: int
    latency_micros: int
    instance_name: str = ""


class Store:
    """Embedded store with a serialized writer and buffered audit appends."""

    def __init__(
        self,
        path: str | Path = ":memory:",
        audit_mode: str = "buffered",
        flush_seconds: float = 1.0,
        instance_name: str = "dsgate",
        audit_enabled: bool = True,
    ):
        self.path = str(path)
        self.audit_mode = audit_mode
        self.audit_enabled = audit_enabled
        self.instance_name = instance_name
        self._flush_seconds = min(max(flush_seconds, 0.05), 1.0)
        self._conn = sqlite3.connect(self.path, check_same_thread=False)
        self._lock = threading.RLock()
        with self._lock:
            self._conn.executescript(_SCHEMA)
            self._conn.commit()
            row = self._conn.execute("SELECT COALESCE(MAX(id), 0) FROM audit").fetchone()
        self._next_audit_id = row[0] + 1
        self._id_lock = threading.Lock()
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self._closed = threading.Event()
        self._writer = None
        if audit_mode == "buffered":
            self._writer = threading.Thread(
                target=self._writer_loop, name="audit-writer", daemon=True
            )
            self._writer.start()

    # --- users -----------------------------------------------------------

    def put_user(self, subject: str, roles=frozenset(), active: bool = True) -> UserRecord:
        record = UserRecord(subject, frozenset(roles), active, time.time())
        with self._lock:
            self._conn.execute(
                "INSERT INTO users (subject, roles, active, created_at) VALUES (?,?,?,?) "
                "ON CONFLICT(subject) DO UPDATE SET roles=excluded.roles, "
                "active=excluded.active",
                (subject, json.dumps(sorted(record.roles)), int(active), record.created_at),
            )
            self._conn.commit()
        return record

    def get_user(self, subject: str) -> UserRecord:
        with self._lock:
            row = self._conn.execute(
                "SELECT subject, roles, active, created_at FROM users WHERE subject = ?",
                (subject,),
            ).fetchone()
        if row is None:
            raise NotFound(f"no such user: {subject}")
        return UserRecord(row[0], frozenset(json.loads(row[1])), bool(row[2]), row[3])

    def set_active(self, subject: str, active: bool) -> UserRecord:
        with self._lock:
            cursor = self._conn.execute(
                "UPDATE users SET active = ? WHERE subject = ?", (int(active), subject)
            )
            self._conn.commit()
        if cursor.rowcount == 0:
            raise NotFound(f"no such user: {subject}")
        return self.get_user(subject)

    def list_users(self) -> list[UserRecord]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT subject, roles, active, created_at FROM users ORDER BY subject"
            ).fetchall()
        return [
            UserRecord(r[0], frozenset(json.loads(r[1])), bool(r[2]), r[3]) for r in rows
        ]

    # --- api keys ----------------------------------------------------------

    def put_api_key(self, record: ApiKeyRecord) -> ApiKeyRecord:
        with self._lock:
            self._conn.execute(
                "INSERT INTO api_keys (fingerprint, key_hash, subject, roles, "
                "issued_at, expires_at, revoked) VALUES (?,?,?,?,?,?,?)",
                (
                    record.fingerprint,
                    record.key_hash,
                    record.subject,
                    json.dumps(sorted(record.roles)),
                    record.issued_at,
                    record.expires_at,
                    int(record.revoked),
                ),
            )
            self._conn.commit()
        return record

    def get_api_key_by_hash(self, key_hash: str) -> ApiKeyRecord:
        with self._lock:
            row = self._conn.execute(
                "SELECT fingerprint, key_hash, subject, roles, issued_at, expires_at, "
                "revoked FROM api_keys WHERE key_hash = ?",
                (key_hash,),
            ).fetchone()
        if row is None:
            raise NotFound("unknown api key")
        return self._key_from_row(row)

    def list_api_keys(self, subject: str | None = None) -> list[ApiKeyRecord]:
        sql = (
            "SELECT fingerprint, key_hash, subject, roles, issued_at, expires_at, "
            "revoked FROM api_keys"
        )
        args: tuple = ()
        if subject is not None:
            sql += " WHERE subject = ?"
            args = (subject,)
        with self._lock:
            rows = self._conn.execute(sql + " ORDER BY issued_at", args).fetchall()
        return [self._key_from_row(r) for r in rows]

    def revoke_api_key(self, fingerprint: str) -> None:
        with self._lock:
            cursor = self._conn.execute(
                "UPDATE api_keys SET revoked = 1 WHERE fingerprint = ?", (fingerprint,)
            )
            self._conn.commit()
        if cursor.rowcount == 0:
            raise NotFound(f"unknown key fingerprint: {fingerprint}")

    @staticmethod
    def _key_from_row(row) -> ApiKeyRecord:
        return ApiKeyRecord(
            fingerprint=row[0],
            key_hash=row[1],
            subject=row[2],
            roles=frozenset(json.loads(row[3])),
            issued_at=row[4],
            expires_at=row[5],
            revoked=bool(row[6]),
        )

    # --- audit ---------------------------------------------------------------

    def append_audit(
        self,
        subject: str,
        method: str,
        path: str,
        status: int,
        latency_micros: int,
        timestamp: float | None = None,
    ) -> int | None:
        """Record one service invocation; returns the assigned id.

        No-op returning None when auditing is disabled.
        """
        if not self.audit_enabled:
            return None
        with self._id_lock:
            audit_id = self._next_audit_id
            self._next_audit_id += 1
        record = AuditRecord(
            id=audit_id,
            timestamp=time.time() if timestamp is None else timestamp,
            subject=subject,
            method=method,
            path=path,
            status=status,
            latency_micros=max(int(latency_micros), 0),
            instance_name=self.instance_name,
        )
        if self.audit_mode == "buffered" and not self._closed.is_set():
            self._queue.put(record)
        else:
            self._write_batch([record])
        return audit_id

    def _write_batch(self, records: list[AuditRecord]) -> None:
        try:
            with self._lock:
                self._conn.executemany(
                    "INSERT INTO audit (id, ts, subject, method, path, status, "
                    "latency_micros, instance) VALUES (?,?,?,?,?,?,?,?)",
                    [
                        (
                            r.id,
                            r.timestamp,
                            r.subject,
                            r.method,
                            r.path,
                            r.status,
                            r.latency_micros,
                            r.instance_name,
                        )
                        for r in records
                    ],
                )
                self._conn.commit()
        except sqlite3.OperationalError as exc:
            if "full" in str(exc).lower():
                raise StorageFull(str(exc)) from exc
            raise

    def _drain(self) -> list[AuditRecord]:
        batch = []
        while True:
            try:
                batch.append(self._queue.get_nowait())
            except queue.Empty:
                return batch

    def _writer_loop(self) -> None:
        while not self._closed.is_set():
            self._closed.wait(self._flush_seconds)
            batch = self._drain()
            if batch:
                try:
                    self._write_batch(batch)
                except Exception:
                    logger.exception("audit writer failed; %d records lost", len(batch))

    def flush_audit(self) -> None:
        """Drain any buffered audit records synchronously."""
        batch = self._drain()
        if batch:
            self._write_batch(batch)

    def query_audit(
        self,
        subject: str | None = None,
        path_prefix: str | None = None,
        time_range: tuple[float, float] | None = None,
        status: int | None = None,
        offset: int = 0,
        limit: int = 100,
    ) -> list[AuditRecord]:
        """Filtered audit records, most recent first."""
        clauses, args = [], []
        if subject is not None:
            clauses.append("subject = ?")
            args.append(subject)
        if path_prefix is not None:
            clauses.append(r"path LIKE ? ESCAPE '\'")
            args.append(path_prefix.replace("%", r"\%").replace("_", r"\_") + "%")
        if time_range is not None:
            clauses.append("ts >= ? AND ts <= ?")
            args.extend(time_range)
        if status is not None:
            clauses.append("status = ?")
            args.append(status)
        sql = (
            "SELECT id, ts, subject, method, path, status, latency_micros, instance "
            "FROM audit"
        )
        if clauses:
            sql += " WHERE " + " AND ".join(clauses)
        sql += " ORDER BY ts DESC, id DESC LIMIT ? OFFSET ?"
        args.extend([limit, offset])
        with self._lock:
            rows = self._conn.execute(sql, args).fetchall()
        return [AuditRecord(*row) for row in rows]

    def count_audit(self) -> int:
        with self._lock:
            return self._conn.execute("SELECT COUNT(*) FROM audit").fetchone()[0]

    # --- lifecycle -------------------------------------------------------------

    def close(self) -> None:
        if self._closed.is_set():
            return
        self._closed.set()
        if self._writer is not None:
            self._writer.join(timeout=3)
        self.flush_audit()
        with self._lock:
            self._conn.close()


class AccessLog:
    """Rolling HTTPD-style access log; one line per service request."""

    def __init__(self, directory: str | Path):
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        self.file = path / "access.log"
        self._logger = logging.getLogger(f"dsgate.access.{id(self)}")
        self._logger.setLevel(logging.INFO)
        self._logger.propagate = False
        handler = logging.handlers.RotatingFileHandler(
            self.file, maxBytes=ACCESS_LOG_MAX_BYTES, backupCount=ACCESS_LOG_KEEP
        )
        handler.setFormatter(logging.Formatter("%(message)s"))
        self._logger.addHandler(handler)
        self._handler = handler

    def write(
        self,
        remote: str,
        subject: str,
        method: str,
        path: str,
        status: int,
        body_bytes: int,
        latency_micros: int,
        timestamp: float | None = None,
    ) -> None:
        ts = time.strftime(
            "%d/%b/%Y:%H:%M:%S %z", time.localtime(timestamp or time.time())
        )
        self._logger.info(
            '%s - %s [%s] "%s %s HTTP/1.1" %d %d %d',
            remote or "-",
            subject or "-",
            ts,
            method,
            path,
            status,
            body_bytes,
            latency_micros,
        )

    def close(self) -> None:
        self._handler.close()
        self._logger.removeHandler(self._handler)


@dataclass
class Auditor:
    """Couples the audit store and the access log so both sinks stay in step."""

    store: Store
    access_log: AccessLog | None = None

    def record(
        self,
        *,
        remote: str,
        subject: str,
        method: str,
        path: str,
        status: int,
        body_bytes: int,
        latency_micros: int,
    ) -> int | None:
        if not self.store.audit_enabled:
            return None
        audit_id = self.store.append_audit(
            subject=subject or "-",
            method=method,
            path=path,
            status=status,
            latency_micros=latency_micros,
        )
        if self.access_log is not None:
            self.access_log.write(
                remote, subject, method, path, status, body_bytes, latency_micros
            )
        return audit_id
