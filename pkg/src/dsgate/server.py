"""Two-port HTTP harness: data services on one port, admin on the other.

The service port exposes only ``/services/...``; the console port exposes
the admin API under ``/admin/...`` plus (optionally) the web console's
static assets. Shutdown is two-phase: listeners close immediately so new
connections are refused, then in-flight requests drain for up to ten
seconds.
"""

from __future__ import annotations

import errno
import http.server
import logging
import mimetypes
import threading
import time
from pathlib import Path

from .admin import AdminApi, ProjectRegistry, ProjectWatcher
from .errors import GatewayError, PortInUse
from .gateway import Gateway, GatewayRequest, RequestOutcome
from .model import Project, ServerConfig
from .modifiers import ModifierRegistry, builtin_modifiers
from .providers import ProviderRegistry, builtin_registry
from .security import SecurityService
from .store import AccessLog, Auditor, Store

logger = logging.getLogger(__name__)

SHUTDOWN_GRACE_SECONDS = 10.0


class _TrackingServer(http.server.ThreadingHTTPServer):
    daemon_threads = True
    block_on_close = False

    def __init__(self, address, handler):
        self.in_flight = 0
        self.in_flight_lock = threading.Lock()
        self.draining = False
        try:
            super().__init__(address, handler)
        except OSError as exc:
            if exc.errno in (errno.EADDRINUSE, errno.EACCES):
                raise PortInUse(f"cannot bind {address[0]}:{address[1]}: {exc}") from exc
            raise


def _make_handler(dispatcher, name: str):
    class Handler(http.server.BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        timeout = 65

        def log_message(self, *args):
            pass  # request logging goes through the access log / audit trail

        def _dispatch(self):
            server: _TrackingServer = self.server  # type: ignore[assignment]
            if server.draining:
                self.close_connection = True
                self.send_response(503)
                self.send_header("Content-Length", "0")
                self.send_header("Connection", "close")
                self.end_headers()
                return
            with server.in_flight_lock:
                server.in_flight += 1
            try:
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                request = GatewayRequest.from_parts(
                    self.command,
                    self.path,
                    headers=dict(self.headers.items()),
                    body=body,
                    remote_addr=self.client_address[0],
                )
                outcome: RequestOutcome = dispatcher(request)
                self.send_response(outcome.status)
                self.send_header("Content-Type", outcome.content_type)
                self.send_header("Content-Length", str(len(outcome.body)))
                for header, value in outcome.headers.items():
                    self.send_header(header, value)
                self.end_headers()
                if outcome.body:
                    self.wfile.write(outcome.body)
            except (BrokenPipeError, ConnectionResetError):
                self.close_connection = True
            except Exception:
                logger.exception("%s handler crashed", name)
                self.close_connection = True
            finally:
                with server.in_flight_lock:
                    server.in_flight -= 1

        do_GET = do_POST = do_PUT = do_DELETE = _dispatch

    Handler.__name__ = f"{name}Handler"
    return Handler


class _ConsoleDispatcher:
    """Routes /admin/* to the admin API and serves console assets."""

    def __init__(self, admin: AdminApi, assets_dir: str | Path | None):
        self.admin = admin
        self.assets_dir = Path(assets_dir).resolve() if assets_dir else None

    def __call__(self, request: GatewayRequest) -> RequestOutcome:
        if request.path == "/admin" or request.path.startswith("/admin/"):
            return self.admin.handle(request)
        if request.method.upper() == "GET" and self.assets_dir is not None:
            return self._static(request.path)
        return RequestOutcome(404, body=b'{"error": "NotFound"}')

    def _static(self, path: str) -> RequestOutcome:
        relative = path.lstrip("/") or "index.html"
        candidate = (self.assets_dir / relative).resolve()
        if not str(candidate).startswith(str(self.assets_dir)) or not candidate.is_file():
            return RequestOutcome(404, body=b'{"error": "NotFound"}')
        content_type = mimetypes.guess_type(candidate.name)[0] or "application/octet-stream"
        return RequestOutcome(200, content_type=content_type, body=candidate.read_bytes())


class ServerHandle:
    """A running pair of listeners plus everything they share."""

    def __init__(
        self,
        config: ServerConfig,
        service_server: _TrackingServer,
        console_server: _TrackingServer,
        gateway: Gateway,
        admin: AdminApi,
        registry: ProjectRegistry,
        security: SecurityService,
        store: Store,
        access_log: AccessLog | None,
        watcher: ProjectWatcher | None,
    ):
        self.config = config
        self.started_at = time.time()
        self._service_server = service_server
        self._console_server = console_server
        self.gateway = gateway
        self.admin = admin
        self.registry = registry
        self.security = security
        self.store = store
        self.access_log = access_log
        self.watcher = watcher
        self._threads = [
            threading.Thread(
                target=service_server.serve_forever, name="service-listener", daemon=True
            ),
            threading.Thread(
                target=console_server.serve_forever, name="console-listener", daemon=True
            ),
        ]
        for thread in self._threads:
            thread.start()

    @property
    def service_port(self) -> int:
        return self._service_server.server_address[1]

    @property
    def console_port(self) -> int:
        return self._console_server.server_address[1]

    def shutdown(self, grace_seconds: float = SHUTDOWN_GRACE_SECONDS) -> None:
        """Refuse new work immediately, drain in-flight requests, release state."""
        for server in (self._service_server, self._console_server):
            server.draining = True
            server.shutdown()
            server.server_close()
        deadline = time.monotonic() + grace_seconds
        while time.monotonic() < deadline:
            with self._service_server.in_flight_lock:
                service_busy = self._service_server.in_flight
            with self._console_server.in_flight_lock:
                console_busy = self._console_server.in_flight
            if service_busy == 0 and console_busy == 0:
                break
            time.sleep(0.02)
        if self.watcher is not None:
            self.watcher.stop()
        self.store.close()
        if self.access_log is not None:
            self.access_log.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve(
    config: ServerConfig,
    projects: list[Project] = (),
    project_dir: str | Path | None = None,
    providers: ProviderRegistry | None = None,
    modifiers: ModifierRegistry | None = None,
    console_assets: str | Path | None = None,
    watch: bool = True,
    watch_poll_seconds: float = 1.0,
    clock=time.time,
) -> ServerHandle:
    """Start both listeners and return a handle to the running server."""
    if config.protocol == "https" and not config.external_tls_terminator:
        raise GatewayError(
            "protocol https requires an external TLS terminator "
            "(set externalTlsTerminator true once one is in front)"
        )

    providers = providers if providers is not None else builtin_registry()
    modifiers = modifiers if modifiers is not None else builtin_modifiers()

    store = Store(
        config.store_path,
        audit_mode=config.audit_mode,
        flush_seconds=config.audit_flush_seconds,
        instance_name=config.instance_name,
        audit_enabled=config.enable_audit,
    )
    access_log = AccessLog(config.log_directory) if config.enable_audit else None
    security = SecurityService(config, store, clock=clock)
    auditor = Auditor(store=store, access_log=access_log)

    registry = ProjectRegistry(providers, watch_directory=project_dir)
    for project in projects:
        registry.put(project)

    watcher = None
    if project_dir is not None and watch:
        watcher = ProjectWatcher(registry, poll_seconds=watch_poll_seconds)
        watcher.start()

    gateway = Gateway(
        config=config,
        projects=registry,
        providers=providers,
        modifiers=modifiers,
        security=security,
        auditor=auditor,
        clock=clock,
    )
    admin = AdminApi(registry, security)

    service_server = _TrackingServer(
        (config.host, config.service_port), _make_handler(gateway.handle, "Service")
    )
    try:
        console_server = _TrackingServer(
            (config.host, config.console_port),
            _make_handler(_ConsoleDispatcher(admin, console_assets), "Console"),
        )
    except PortInUse:
        service_server.server_close()
        raise

    handle = ServerHandle(
        config=config,
        service_server=service_server,
        console_server=console_server,
        gateway=gateway,
        admin=admin,
        registry=registry,
        security=security,
        store=store,
        access_log=access_log,
        watcher=watcher,
    )
    admin.started_at = handle.started_at
    logger.info(
        "serving on %s:%d (services) and %s:%d (console); auth=%s audit=%s",
        config.host,
        handle.service_port,
        config.host,
        handle.console_port,
        config.authentication_protocol if config.enable_authentication else "disabled",
        store.audit_mode if config.enable_audit else "disabled",
    )
    return handle
