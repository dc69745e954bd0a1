"""HTTP pass-through provider for web-based data sources.

The bound query text is a URL path (plus query string) relative to the
descriptor's ``baseUrl`` and is sent to the upstream byte-for-byte; the
response body comes back as the binary payload with the upstream content
type. Caller headers are forwarded only when named in the descriptor's
``forwardHeaders`` allow-list.
"""

from __future__ import annotations

import http.client
import socket
import threading
from urllib.parse import urlsplit

from ..errors import ConnectionRefused, ExecutionTimeout, InvalidDescriptor
from ..model import ConnectionDescriptor
from ..templates import BoundQuery
from . import KINDS_ALL, Provider, ProviderDescriptor, ProviderResult

_VERB_BY_KIND = {
    "query": "GET",
    "submit": "POST",
    "update": "PUT",
    "delete": "DELETE",
}


class HttpHandle:
    """Per-thread persistent connections to one upstream."""

    def __init__(self, base_url: str, forward_headers: tuple[str, ...]):
        parts = urlsplit(base_url)
        if parts.scheme not in ("http", "https") or not parts.hostname:
            raise InvalidDescriptor(f"bad baseUrl: {base_url!r}")
        self.scheme = parts.scheme
        self.host = parts.hostname
        self.port = parts.port or (443 if parts.scheme == "https" else 80)
        self.path_prefix = parts.path.rstrip("/")
        self.forward_headers = tuple(h.lower() for h in forward_headers)
        self._local = threading.local()

    def _connection(self, timeout: float) -> http.client.HTTPConnection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            cls = (
                http.client.HTTPSConnection
                if self.scheme == "https"
                else http.client.HTTPConnection
            )
            conn = cls(self.host, self.port, timeout=timeout)
            self._local.conn = conn
        else:
            conn.timeout = timeout
        return conn

    def drop_connection(self) -> None:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            conn.close()
            self._local.conn = None

    def request(self, method: str, target: str, body: bytes | None, headers: dict, timeout: float):
        conn = self._connection(timeout)
        try:
            conn.request(method, target, body=body, headers=headers)
            response = conn.getresponse()
            data = response.read()
            return response.status, dict(response.getheaders()), data
        except socket.timeout as exc:
            self.drop_connection()
            raise ExecutionTimeout(f"upstream exceeded {timeout:.0f}s timeout") from exc
        except (ConnectionRefusedError, ConnectionResetError, OSError) as exc:
            self.drop_connection()
            raise ConnectionRefused(str(exc)) from exc
        except http.client.HTTPException as exc:
            self.drop_connection()
            raise ConnectionRefused(str(exc)) from exc


class HttpProvider(Provider):
    descriptor = ProviderDescriptor(
        provider_id="http",
        supported_endpoint_kinds=KINDS_ALL,
        default_substitution_mode="raw",
    )

    def __init__(self) -> None:
        self._handles: dict[tuple, HttpHandle] = {}
        self._lock = threading.Lock()

    def connect(self, descriptor: ConnectionDescriptor) -> HttpHandle:
        properties = descriptor.resolved_properties()
        base_url = properties.get("baseUrl")
        if not base_url:
            raise InvalidDescriptor("http provider requires a baseUrl property")
        forward = tuple(
            h.strip() for h in properties.get("forwardHeaders", "").split(",") if h.strip()
        )
        key = (base_url, forward)
        with self._lock:
            handle = self._handles.get(key)
            if handle is None:
                handle = HttpHandle(base_url, forward)
                self._handles[key] = handle
            return handle

    def execute(
        self,
        handle: HttpHandle,
        kind: str,
        bound_query: BoundQuery,
        payload: bytes | None = None,
        headers: dict[str, str] | None = None,
        timeout: float = 30.0,
    ) -> ProviderResult:
        target = bound_query.text
        if not target.startswith("/"):
            target = "/" + target
        target = handle.path_prefix + target

        outbound: dict[str, str] = {}
        if headers and handle.forward_headers:
            for name, value in headers.items():
                if name.lower() in handle.forward_headers:
                    outbound[name] = value

        status, response_headers, data = handle.request(
            _VERB_BY_KIND[kind], target, payload, outbound, timeout
        )
        content_type = response_headers.get("Content-Type", "application/octet-stream")
        if status >= 400:
            return ProviderResult(
                status="error",
                error_status=status,
                error_message=f"upstream returned {status}",
                binary_payload=data,
                content_type=content_type,
            )
        result = ProviderResult(
            status="ok" if data else "empty",
            binary_payload=data,
            content_type=content_type,
        )
        if kind != "query":
            result.affected_count = 1  # upstream does not report a count
        return result
