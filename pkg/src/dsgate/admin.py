"""Administrative surface: project lifecycle, hot reload, users, credentials.

The project registry is the single mutable root of the serving state.
Replacements are atomic (readers take whole snapshots), versions increase
monotonically, and a failed parse never reduces the set of servable
endpoints: the last good version keeps serving and an admin event records
the failure.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    AuthError,
    Forbidden,
    GatewayError,
    MalformedDocument,
    NoSigningKey,
    NotFound,
    SchemaViolation,
    TemplateMismatch,
    UnknownProvider,
)
from .gateway import GatewayRequest, RequestOutcome, _error_body
from .model import Project, parse_project_file, serialize_project_file
from .providers import ProviderRegistry
from .security import Principal, SecurityService

logger = logging.getLogger(__name__)

ADMIN_ROLE = "admin"
WATCH_POLL_SECONDS = 1.0


@dataclass(frozen=True)
class RegisteredProject:
    project: Project
    version: int
    source_path: str = ""


class ProjectRegistry:
    """name -> (Project, version); swaps are atomic and serialized."""

    def __init__(self, providers: ProviderRegistry, watch_directory: str | Path | None = None):
        self._providers = providers
        self._entries: dict[str, RegisteredProject] = {}
        self._lock = threading.RLock()
        self.watch_directory = Path(watch_directory) if watch_directory else None
        self.events: deque[dict] = deque(maxlen=200)

    def _validate_providers(self, project: Project) -> None:
        for profile in project.profiles.values():
            if profile.provider_id not in self._providers:
                raise UnknownProvider(
                    f"profile {profile.name!r} references unregistered provider "
                    f"{profile.provider_id!r}"
                )

    def put(self, project: Project, source_path: str = "", persist: bool = False) -> int:
        """Register or replace a project; returns the new version."""
        self._validate_providers(project)
        with self._lock:
            current = self._entries.get(project.name)
            version = (current.version + 1) if current else 1
            path = source_path or (current.source_path if current else "")
            if persist:
                path = str(self._write_file(project))
            self._entries[project.name] = RegisteredProject(project, version, path)
        self._emit("project-updated", name=project.name, version=version)
        return version

    def _write_file(self, project: Project) -> Path:
        if self.watch_directory is None:
            return Path("")
        self.watch_directory.mkdir(parents=True, exist_ok=True)
        final = self.watch_directory / f"{project.name}.json"
        temporary = final.with_suffix(".json.tmp")
        temporary.write_bytes(serialize_project_file(project))
        os.replace(temporary, final)  # readers never observe a partial file
        return final

    def retire(self, name: str, delete_file: bool = False) -> None:
        with self._lock:
            entry = self._entries.pop(name, None)
        if entry is None:
            raise NotFound(f"no such project: {name!r}")
        if delete_file and entry.source_path:
            try:
                os.unlink(entry.source_path)
            except FileNotFoundError:
                pass
        self._emit("project-retired", name=name)

    def snapshot(self) -> dict[str, tuple[Project, int]]:
        with self._lock:
            return {
                name: (entry.project, entry.version)
                for name, entry in self._entries.items()
            }

    def get(self, name: str) -> RegisteredProject:
        with self._lock:
            entry = self._entries.get(name)
        if entry is None:
            raise NotFound(f"no such project: {name!r}")
        return entry

    def names(self) -> list[str]:
        with self._lock:
            return sorted(self._entries)

    def _emit(self, kind: str, **data) -> None:
        event = {"kind": kind, "at": time.time(), **data}
        self.events.append(event)
        logger.info("admin event: %s", event)


class ProjectWatcher:
    """Polls the watch directory and hot-reloads changed project files."""

    def __init__(self, registry: ProjectRegistry, poll_seconds: float = WATCH_POLL_SECONDS):
        if registry.watch_directory is None:
            raise ValueError("registry has no watch directory")
        self.registry = registry
        self.poll_seconds = poll_seconds
        self._seen: dict[Path, tuple[float, int]] = {}
        self._names_by_path: dict[Path, str] = {}
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self.scan()  # pick up pre-existing files before serving
        self._thread = threading.Thread(
            target=self._loop, name="project-watcher", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=self.poll_seconds + 2)

    def _loop(self) -> None:
        while not self._stop.wait(self.poll_seconds):
            try:
                self.scan()
            except Exception:
                logger.exception("project watcher scan failed")

    def scan(self) -> None:
        directory = self.registry.watch_directory
        if not directory.is_dir():
            return
        present: set[Path] = set()
        for path in sorted(directory.glob("*.json")):
            present.add(path)
            try:
                stat = path.stat()
            except OSError:
                continue
            signature = (stat.st_mtime, stat.st_size)
            if self._seen.get(path) == signature:
                continue
            self._seen[path] = signature
            self._load(path)
        for path in list(self._seen):
            if path not in present:
                del self._seen[path]
                name = self._names_by_path.pop(path, None)
                if name is not None:
                    try:
                        self.registry.retire(name)
                    except NotFound:
                        pass

    def _load(self, path: Path) -> None:
        try:
            project = parse_project_file(path.read_bytes(), name=path.stem)
            version = self.registry.put(project, source_path=str(path))
            self._names_by_path[path] = project.name
            logger.info("reloaded project %r v%d from %s", project.name, version, path)
        except (MalformedDocument, SchemaViolation, TemplateMismatch, UnknownProvider) as exc:
            # keep the last good version serving
            self.registry._emit(
                "reload-failed", path=str(path), error=f"{type(exc).__name__}: {exc}"
            )


# --- the admin REST API ------------------------------------------------------------

class AdminApi:
    """JSON API on the console port. All state flows through the same
    registries and services the gateway uses, so anything the web console
    can do is equally scriptable."""

    def __init__(
        self,
        registry: ProjectRegistry,
        security: SecurityService,
        started_at: float | None = None,
    ):
        self.registry = registry
        self.security = security
        self.started_at = started_at if started_at is not None else time.time()

    # -- plumbing --

    def handle(self, request: GatewayRequest) -> RequestOutcome:
        try:
            principal = self.security.authenticate(request.headers)
        except AuthError as exc:
            return self._error(401, type(exc).__name__, str(exc))
        try:
            return self._dispatch(request, principal)
        except Forbidden as exc:
            return self._error(403, "Forbidden", str(exc))
        except NotFound as exc:
            return self._error(404, "NotFound", str(exc))
        except (MalformedDocument, SchemaViolation, TemplateMismatch,
                UnknownProvider, NoSigningKey) as exc:
            return self._error(400, type(exc).__name__, str(exc))
        except GatewayError as exc:
            return self._error(500, type(exc).__name__, str(exc))
        except Exception:
            logger.exception("admin API failure on %s %s", request.method, request.path)
            return self._error(500, "InternalError", "internal error")

    def _dispatch(self, request: GatewayRequest, principal: Principal) -> RequestOutcome:
        method = request.method.upper()
        parts = [p for p in request.path.split("/") if p]
        if not parts or parts[0] != "admin":
            raise NotFound(f"not an admin path: {request.path!r}")
        tail = parts[1:]

        if tail == ["status"] and method == "GET":
            return self._status()
        if tail == ["projects"]:
            if method == "GET":
                return self._list_projects()
            if method == "POST":
                self._require_admin(principal)
                return self._put_project(request)
        if len(tail) == 2 and tail[0] == "projects":
            if method == "GET":
                return self._get_project(tail[1])
            if method == "DELETE":
                self._require_admin(principal)
                self.registry.retire(tail[1], delete_file=True)
                return self._json(200, {"retired": tail[1]})
        if tail == ["users"] and method == "GET":
            return self._list_users(principal)
        if len(tail) == 3 and tail[0] == "users" and method == "POST":
            self._require_admin(principal)
            return self._set_user_active(tail[1], tail[2])
        if tail == ["keys"]:
            if method == "GET":
                return self._list_keys(principal)
            if method == "POST":
                return self._issue_key(request, principal)
        if len(tail) == 2 and tail[0] == "keys" and method == "DELETE":
            self._require_admin(principal)
            self.security.revoke_api_key(tail[1])
            return self._json(200, {"revoked": tail[1]})
        if tail == ["jwt"] and method == "POST":
            return self._issue_jwt(request, principal)
        if tail == ["audit"] and method == "GET":
            self._require_admin(principal)
            return self._query_audit(request)
        if tail == ["events"] and method == "GET":
            self._require_admin(principal)
            return self._json(200, list(self.registry.events))
        raise NotFound(f"no admin route for {method} {request.path}")

    def _require_admin(self, principal: Principal) -> None:
        if not self.security.config.enable_authentication:
            return
        if ADMIN_ROLE not in principal.roles:
            raise Forbidden(f"{principal.subject!r} lacks the {ADMIN_ROLE!r} role")

    @staticmethod
    def _json(status: int, payload) -> RequestOutcome:
        return RequestOutcome(
            status, body=json.dumps(payload, indent=2).encode("utf-8")
        )

    @staticmethod
    def _error(status: int, error: str, detail: str) -> RequestOutcome:
        return RequestOutcome(status, body=_error_body(error, detail))

    @staticmethod
    def _body_json(request: GatewayRequest) -> dict:
        try:
            doc = json.loads(request.body.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise MalformedDocument(f"request body is not JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise SchemaViolation("request body must be a JSON object")
        return doc

    # -- handlers --

    def _status(self) -> RequestOutcome:
        store = self.security.store
        return self._json(
            200,
            {
                "instanceName": self.security.config.instance_name,
                "startedAt": self.started_at,
                "uptimeSeconds": time.time() - self.started_at,
                "auditMode": store.audit_mode if store.audit_enabled else "disabled",
                "projects": {
                    name: version
                    for name, (_p, version) in self.registry.snapshot().items()
                },
            },
        )

    def _list_projects(self) -> RequestOutcome:
        snapshot = self.registry.snapshot()
        return self._json(
            200,
            [
                {"name": name, "version": version}
                for name, (_p, version) in sorted(snapshot.items())
            ],
        )

    def _put_project(self, request: GatewayRequest) -> RequestOutcome:
        name_hint = request.query_params.get("name")
        project = parse_project_file(request.body, name=name_hint)
        version = self.registry.put(project, persist=True)
        return self._json(200, {"name": project.name, "version": version})

    def _get_project(self, name: str) -> RequestOutcome:
        entry = self.registry.get(name)
        outcome = RequestOutcome(200, body=serialize_project_file(entry.project))
        outcome.headers["X-Project-Version"] = str(entry.version)
        return outcome

    def _list_users(self, principal: Principal) -> RequestOutcome:
        users = self.security.store.list_users()
        if self.security.config.enable_authentication and ADMIN_ROLE not in principal.roles:
            users = [u for u in users if u.subject == principal.subject]
        return self._json(
            200,
            [
                {
                    "subject": u.subject,
                    "roles": sorted(u.roles),
                    "active": u.active,
                    "createdAt": u.created_at,
                }
                for u in users
            ],
        )

    def _set_user_active(self, subject: str, action: str) -> RequestOutcome:
        if action not in ("activate", "deactivate"):
            raise NotFound(f"unknown user action: {action!r}")
        self.security.set_user_active(subject, action == "activate")
        return self._json(200, {"subject": subject, "active": action == "activate"})

    def _list_keys(self, principal: Principal) -> RequestOutcome:
        subject = None
        if self.security.config.enable_authentication and ADMIN_ROLE not in principal.roles:
            subject = principal.subject
        keys = self.security.store.list_api_keys(subject)
        return self._json(
            200,
            [
                {
                    "fingerprint": k.fingerprint,  # never the key itself
                    "subject": k.subject,
                    "roles": sorted(k.roles),
                    "issuedAt": k.issued_at,
                    "expiresAt": k.expires_at,
                    "revoked": k.revoked,
                }
                for k in keys
            ],
        )

    def _issue_key(self, request: GatewayRequest, principal: Principal) -> RequestOutcome:
        body = self._body_json(request)
        subject = body.get("subject") or principal.subject
        if (
            self.security.config.enable_authentication
            and subject != principal.subject
            and ADMIN_ROLE not in principal.roles
        ):
            raise Forbidden("issuing keys for another subject requires the admin role")
        roles = set(body.get("roles", []))
        ttl = int(body.get("ttlSeconds", 3600))
        key, record = self.security.issue_api_key(subject, roles, ttl)
        return self._json(
            200,
            {
                "apiKey": key,  # shown exactly once
                "fingerprint": record.fingerprint,
                "subject": record.subject,
                "expiresAt": record.expires_at,
            },
        )

    def _issue_jwt(self, request: GatewayRequest, principal: Principal) -> RequestOutcome:
        body = self._body_json(request)
        subject = body.get("subject") or principal.subject
        if (
            self.security.config.enable_authentication
            and subject != principal.subject
            and ADMIN_ROLE not in principal.roles
        ):
            raise Forbidden("issuing tokens for another subject requires the admin role")
        token = self.security.issue_jwt(
            subject, set(body.get("roles", [])), int(body.get("ttlSeconds", 3600))
        )
        return self._json(200, {"token": token, "subject": subject})

    def _query_audit(self, request: GatewayRequest) -> RequestOutcome:
        params = request.query_params
        self.security.store.flush_audit()
        status = params.get("status")
        records = self.security.store.query_audit(
            subject=params.get("subject"),
            path_prefix=params.get("pathPrefix"),
            status=int(status) if status else None,
            offset=int(params.get("offset", 0)),
            limit=min(int(params.get("limit", 100)), 1000),
        )
        return self._json(
            200,
            [
                {
                    "id": r.id,
                    "timestamp": r.timestamp,
                    "subject": r.subject,
                    "method": r.method,
                    "path": r.path,
                    "status": r.status,
                    "latencyMicros": r.latency_micros,
                    "instanceName": r.instance_name,
                }
                for r in records
            ],
        )
