"""Generic SQL provider layer and the embedded SQLite implementation.

``GenericSqlProvider`` owns the SQL-flavoured planning (sql-quoted
substitution); concrete SQL providers extend it and override only
``connect``/``execute``. The embedded provider keeps one shared connection
per database path and serializes executions behind a lock, since the
underlying engine permits a single writer.
"""

from __future__ import annotations

import sqlite3
import threading
import time

from ..errors import (
    ConnectionLost,
    ExecutionTimeout,
    InvalidDescriptor,
    QueryError,
)
from ..model import ConnectionDescriptor
from ..templates import BoundQuery
from . import KINDS_ALL, Provider, ProviderDescriptor, ProviderResult

_PROGRESS_OPCODES = 4000  # opcodes between deadline checks while a query runs


class GenericSqlProvider(Provider):
    """Abstract base for SQL-dialect providers; plans with quoted substitution."""

    descriptor = ProviderDescriptor(
        provider_id="generic-sql",
        supported_endpoint_kinds=KINDS_ALL,
        default_substitution_mode="sql-quoted",
    )


class SqliteHandle:
    """Shared connection to one database file, serialized by a lock."""

    def __init__(self, path: str):
        self.path = path
        self._lock = threading.RLock()
        try:
            self._conn = sqlite3.connect(path, check_same_thread=False)
        except sqlite3.Error as exc:
            raise InvalidDescriptor(f"cannot open database {path!r}: {exc}") from exc
        self._closed = False

    @property
    def connection(self) -> sqlite3.Connection:
        return self._conn

    def run(self, sql: str, timeout: float):
        """Execute one statement with a deadline, returning (columns, rows, count)."""
        deadline = time.monotonic() + timeout
        with self._lock:
            if self._closed:
                raise ConnectionLost(f"database handle {self.path!r} is closed")
            if timeout > 0:
                self._conn.set_progress_handler(
                    lambda: 1 if time.monotonic() > deadline else 0,
                    _PROGRESS_OPCODES,
                )
            try:
                cursor = self._conn.execute(sql)
                rows = cursor.fetchall()
                columns = [d[0] for d in cursor.description] if cursor.description else []
                count = cursor.rowcount
                self._conn.commit()
                return columns, rows, count
            except sqlite3.OperationalError as exc:
                self._conn.rollback()
                if "interrupted" in str(exc).lower():
                    raise ExecutionTimeout(
                        f"query exceeded {timeout:.0f}s timeout"
                    ) from exc
                raise QueryError(str(exc)) from exc
            except sqlite3.ProgrammingError as exc:
                if "closed" in str(exc).lower():
                    raise ConnectionLost(str(exc)) from exc
                raise QueryError(str(exc)) from exc
            except sqlite3.Error as exc:
                self._conn.rollback()
                raise QueryError(str(exc)) from exc
            finally:
                if timeout > 0 and not self._closed:
                    self._conn.set_progress_handler(None, 0)

    def close(self) -> None:
        with self._lock:
            if not self._closed:
                self._closed = True
                self._conn.close()


def _jsonable(value):
    if isinstance(value, bytes):
        return value.decode("utf-8", "replace")
    return value


class SqliteProvider(GenericSqlProvider):
    """Embedded single-file SQL datasource.

    Descriptor properties: ``path`` (file path or ``:memory:``, default
    ``:memory:``). ``initialize`` is accepted and means create-if-missing,
    which is the engine's default behavior anyway.
    """

    descriptor = ProviderDescriptor(
        provider_id="embedded-sql",
        supported_endpoint_kinds=KINDS_ALL,
        default_substitution_mode="sql-quoted",
    )

    def __init__(self) -> None:
        self._handles: dict[str, SqliteHandle] = {}
        self._lock = threading.Lock()

    def connect(self, descriptor: ConnectionDescriptor) -> SqliteHandle:
        properties = descriptor.resolved_properties()
        unknown = set(properties) - {"path"}
        if unknown:
            raise InvalidDescriptor(f"unsupported dataSource keys: {sorted(unknown)}")
        path = properties.get("path", ":memory:")
        with self._lock:
            handle = self._handles.get(path)
            if handle is None:
                handle = SqliteHandle(path)
                self._handles[path] = handle
            return handle

    def execute(
        self,
        handle: SqliteHandle,
        kind: str,
        bound_query: BoundQuery,
        payload: bytes | None = None,
        headers: dict[str, str] | None = None,
        timeout: float = 30.0,
    ) -> ProviderResult:
        if not bound_query.text.strip():
            raise QueryError("endpoint has no query template for this provider")
        columns, raw_rows, count = handle.run(bound_query.text, timeout)
        if kind == "query":
            rows = [
                {col: _jsonable(val) for col, val in zip(columns, row)}
                for row in raw_rows
            ]
            return ProviderResult(status="ok" if rows else "empty", rows=rows)
        affected = max(count, 0)
        return ProviderResult(
            status="ok" if affected else "empty",
            affected_count=affected,
        )

    def close_all(self) -> None:
        with self._lock:
            for handle in self._handles.values():
                handle.close()
            self._handles.clear()
