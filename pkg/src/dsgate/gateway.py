"""The public data-service surface: routing and the per-request pipeline.

Every service request runs the same fixed pipeline: route, authenticate,
authorize, rate-limit, bind parameters, payload modifiers (submit only),
query modifiers, provider execute, result modifiers, format, audit. The
pipeline order never varies by endpoint or provider; a stage trace is
collected per request so tests can assert exactly that.

URL scheme: ``/services/{project}/{provider}/{kind}/{endpoint}`` where the
kind segment is one of query/submit/update/delete and must agree with the
HTTP verb (GET/POST/PUT/DELETE respectively).
"""

from __future__ import annotations

import json
import logging
import math
import time
import uuid
from dataclasses import dataclass, field
from urllib.parse import parse_qsl

from . import modifiers as modifier_engine
from .errors import (
    AuthenticationFailed,
    AuthError,
    ConnectionLost,
    ConnectionRefused,
    ExecutionTimeout,
    GatewayError,
    InvalidDescriptor,
    MethodMismatch,
    MissingParameter,
    ModifierRejected,
    NotFound,
    QueryError,
    TypeMismatch,
    UndeclaredParameter,
    UnknownProvider,
)
from .model import Endpoint, Project, ServerConfig
from .modifiers import ModifierContext, ModifierRegistry
from .providers import Provider, ProviderRegistry, ProviderResult
from .security import Principal, SecurityService, authorize
from .store import Auditor

logger = logging.getLogger(__name__)

SERVICE_PREFIX = "/services"

_KIND_BY_VERB = {"GET": "query", "POST": "submit", "PUT": "update", "DELETE": "delete"}

_FORM_CONTENT_TYPE = "application/x-www-form-urlencoded"


@dataclass(frozen=True)
class RouteKey:
    project: str
    provider: str
    kind: str
    endpoint_name: str


@dataclass
class GatewayRequest:
    method: str
    path: str
    query_params: dict[str, str] = field(default_factory=dict)
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""
    remote_addr: str = ""

    @classmethod
    def from_parts(
        cls,
        method: str,
        target: str,
        headers: dict[str, str] | None = None,
        body: bytes = b"",
        remote_addr: str = "",
    ) -> "GatewayRequest":
        path, _, query = target.partition("?")
        # repeated query parameters: last occurrence wins
        params = dict(parse_qsl(query, keep_blank_values=True))
        return cls(method, path, params, headers or {}, body, remote_addr)


@dataclass
class RequestOutcome:
    status: int
    content_type: str = "application/json"
    body: bytes = b""
    stage_trace: list[tuple[str, str]] = field(default_factory=list)
    headers: dict[str, str] = field(default_factory=dict)
    subject: str = ""


def _error_body(error: str, detail: str) -> bytes:
    return json.dumps(
        {"error": error, "detail": detail, "requestId": uuid.uuid4().hex}
    ).encode("utf-8")


def _sanitize(message: str, profile_properties: dict[str, str]) -> str:
    """Strip connection-string material from backend error messages."""
    for value in profile_properties.values():
        if len(value) >= 4 and value in message:
            message = message.replace(value, "[redacted]")
    return message[:300]


class Gateway:
    """Drives the request pipeline against one project snapshot source.

    ``projects`` is any object with a ``snapshot()`` method returning
    ``{name: (Project, version)}``; the admin registry provides atomic
    replacement underneath it.
    """

    def __init__(
        self,
        config: ServerConfig,
        projects,
        providers: ProviderRegistry,
        modifiers: ModifierRegistry,
        security: SecurityService,
        auditor: Auditor | None = None,
        clock=time.time,
    ):
        self.config = config
        self.projects = projects
        self.providers = providers
        self.modifiers = modifiers
        self.security = security
        self.auditor = auditor
        self.clock = clock

    # --- routing -----------------------------------------------------------

    def _lookup(
        self, snapshot: dict, key: RouteKey
    ) -> tuple[Project, int, Endpoint]:
        entry = snapshot.get(key.project)
        if entry is None:
            raise NotFound(f"no such project: {key.project!r}")
        project, version = entry
        profile = project.profiles.get(key.provider)
        if profile is None:
            raise NotFound(f"no such provider profile: {key.provider!r}")
        endpoint = profile.endpoints_of_kind(key.kind).get(key.endpoint_name)
        if endpoint is None:
            raise NotFound(f"no such {key.kind} endpoint: {key.endpoint_name!r}")
        return project, version, endpoint

    def route(self, method: str, path: str) -> RouteKey:
        """Map (verb, path) to a route key; verb must agree with the kind segment."""
        parts = [p for p in path.split("/") if p]
        if len(parts) != 5 or "/" + parts[0] != SERVICE_PREFIX:
            raise NotFound(f"not a service path: {path!r}")
        _, project, provider, kind, endpoint_name = parts
        if kind not in ("query", "submit", "update", "delete"):
            raise NotFound(f"unknown endpoint kind segment: {kind!r}")
        expected = _KIND_BY_VERB.get(method.upper())
        if expected != kind:
            raise MethodMismatch(
                f"{method} does not invoke {kind} endpoints"
            )
        key = RouteKey(project, provider, kind, endpoint_name)
        self._lookup(self.projects.snapshot(), key)
        return key

    # --- the pipeline ---------------------------------------------------------

    def handle(self, request: GatewayRequest) -> RequestOutcome:
        """Run the full pipeline; every request yields exactly one outcome
        and (when auditing is on) exactly one audit record."""
        started = time.perf_counter()
        outcome = self._handle_inner(request)
        latency_micros = int((time.perf_counter() - started) * 1_000_000)
        if self.auditor is not None:
            try:
                self.auditor.record(
                    remote=request.remote_addr,
                    subject=outcome.subject,
                    method=request.method,
                    path=request.path,
                    status=outcome.status,
                    body_bytes=len(outcome.body),
                    latency_micros=latency_micros,
                )
            except Exception:
                logger.exception("audit sink failed for %s", request.path)
        return outcome

    def _handle_inner(self, request: GatewayRequest) -> RequestOutcome:
        trace: list[tuple[str, str]] = []
        subject = ""
        try:
            snapshot = self.projects.snapshot()
            key = RouteKey(*self._parse_path(request.method, request.path))
            project, version, endpoint = self._lookup(snapshot, key)

            principal = self.security.authenticate(request.headers)
            subject = principal.subject

            allowed, reason = authorize(principal, endpoint, self.config)
            if not allowed:
                return self._outcome(403, "Forbidden", reason, trace, subject)

            ok, retry_after = self.security.check_rate_limit(principal)
            if not ok:
                outcome = self._outcome(
                    429, "Throttled", "rate limit exceeded", trace, subject
                )
                outcome.headers["Retry-After"] = str(max(1, math.ceil(retry_after)))
                return outcome

            params = self._bind_params(request)
            result, version = self._execute(
                key=key,
                snapshot=snapshot,
                params=params,
                payload=request.body if key.kind == "submit" else None,
                principal=principal,
                headers=request.headers,
                depth=0,
                trace=trace,
            )
            if result.status == "error":
                detail = result.error_message or "backend error"
                outcome = self._outcome(502, "BackendError", detail, trace, subject)
                outcome.headers["X-Project-Version"] = str(version)
                return outcome
            outcome = self._format(endpoint, result, trace, subject)
            outcome.headers["X-Project-Version"] = str(version)
            return outcome

        except NotFound as exc:
            return self._outcome(404, "NotFound", str(exc), trace, subject)
        except MethodMismatch as exc:
            return self._outcome(405, "MethodMismatch", str(exc), trace, subject)
        except AuthError as exc:
            outcome = self._outcome(
                401, type(exc).__name__, str(exc), trace, subject
            )
            outcome.headers["WWW-Authenticate"] = (
                'Bearer realm="data-services"'
                if self.config.authentication_protocol == "jwt"
                else 'ApiKey realm="data-services"'
            )
            return outcome
        except ModifierRejected as exc:
            return self._outcome(403, "ModifierRejected", str(exc), trace, subject)
        except (MissingParameter, UndeclaredParameter, TypeMismatch) as exc:
            return self._outcome(400, type(exc).__name__, str(exc), trace, subject)
        except ExecutionTimeout as exc:
            return self._outcome(408, "Timeout", str(exc), trace, subject)
        except (QueryError, ConnectionRefused, ConnectionLost,
                AuthenticationFailed, InvalidDescriptor, UnknownProvider) as exc:
            return self._outcome(502, type(exc).__name__, str(exc), trace, subject)
        except GatewayError as exc:
            return self._outcome(500, type(exc).__name__, str(exc), trace, subject)
        except Exception:
            logger.exception("unhandled error for %s %s", request.method, request.path)
            return self._outcome(500, "InternalError", "internal error", trace, subject)

    @staticmethod
    def _parse_path(method: str, path: str) -> tuple[str, str, str, str]:
        parts = [p for p in path.split("/") if p]
        if len(parts) != 5 or parts[0] != "services":
            raise NotFound(f"not a service path: {path!r}")
        kind = parts[3]
        if kind not in ("query", "submit", "update", "delete"):
            raise NotFound(f"unknown endpoint kind segment: {kind!r}")
        if _KIND_BY_VERB.get(method.upper()) != kind:
            raise MethodMismatch(f"{method} does not invoke {kind} endpoints")
        return parts[1], parts[2], kind, parts[4]

    def _bind_params(self, request: GatewayRequest) -> dict[str, str]:
        params = dict(request.query_params)
        if request.method.upper() in ("POST", "PUT"):
            content_type = ""
            for name, value in request.headers.items():
                if name.lower() == "content-type":
                    content_type = value
                    break
            if content_type.split(";")[0].strip().lower() == _FORM_CONTENT_TYPE:
                form = parse_qsl(
                    request.body.decode("utf-8", "replace"), keep_blank_values=True
                )
                params.update(dict(form))  # form fields override URL parameters
        return params

    def _execute(
        self,
        *,
        key: RouteKey,
        snapshot: dict,
        params: dict[str, str],
        payload: bytes | None,
        principal: Principal,
        headers: dict[str, str],
        depth: int,
        trace: list[tuple[str, str]],
    ) -> tuple[ProviderResult, int]:
        """Modifier chains + provider execution for one endpoint."""
        project, version, endpoint = self._lookup(snapshot, key)
        profile = project.profiles[key.provider]
        provider: Provider = self.providers.resolve(profile.provider_id)

        ctx = ModifierContext(
            principal=principal,
            endpoint=endpoint,
            request_headers=dict(headers),
            stage_trace=trace,
            invoke=self._invoke_internal,
            depth=depth,
        )

        bound = provider.plan(endpoint, params)

        if endpoint.kind == "submit":
            payload = modifier_engine.apply_payload_chain(
                self.modifiers, endpoint.payload_modifiers, payload or b"", ctx
            )

        bound = modifier_engine.apply_query_chain(
            self.modifiers, endpoint.query_modifiers, bound, ctx
        )

        handle = provider.connect(profile.data_source)
        ctx.record("provider", "execute")
        try:
            result = provider.execute(
                handle,
                endpoint.kind,
                bound,
                payload=payload,
                headers=dict(headers),
                timeout=endpoint.timeout_seconds,
            )
        except QueryError as exc:
            raise QueryError(
                _sanitize(str(exc), profile.data_source.properties)
            ) from exc

        result = modifier_engine.apply_result_chain(
            self.modifiers, endpoint.result_modifiers, result, ctx
        )
        return result, version

    def _invoke_internal(
        self,
        *,
        project: str,
        provider: str,
        kind: str,
        endpoint_name: str,
        params: dict[str, str],
        principal: Principal,
        headers: dict[str, str],
        depth: int,
    ) -> ProviderResult:
        """Nested pipeline entry used by the output chainer.

        The caller's auth context propagates; authorization is re-checked
        against the target endpoint. The nested call is not rate-limited
        (one external request counts once) and keeps its own stage trace.
        """
        snapshot = self.projects.snapshot()
        key = RouteKey(project, provider, kind, endpoint_name)
        _, _, endpoint = self._lookup(snapshot, key)
        allowed, reason = authorize(principal, endpoint, self.config)
        if not allowed:
            raise ModifierRejected(f"chained call denied: {reason}")
        result, _version = self._execute(
            key=key,
            snapshot=snapshot,
            params=params,
            payload=None,
            principal=principal,
            headers=headers,
            depth=depth,
            trace=[],
        )
        if result.status == "error":
            raise QueryError(result.error_message or "chained backend error")
        return result

    # --- formatting ---------------------------------------------------------------

    def _format(
        self,
        endpoint: Endpoint,
        result: ProviderResult,
        trace: list[tuple[str, str]],
        subject: str,
    ) -> RequestOutcome:
        if result.binary_payload is not None:
            return RequestOutcome(
                200,
                content_type=result.content_type,
                body=result.binary_payload,
                stage_trace=trace,
                subject=subject,
            )
        if endpoint.kind != "query" and not result.rows:
            body = json.dumps(
                {"status": result.status, "affectedCount": result.affected_count or 0}
            ).encode("utf-8")
            return RequestOutcome(
                200, body=body, stage_trace=trace, subject=subject
            )
        if endpoint.output_format == "csv":
            return RequestOutcome(
                200,
                content_type="text/csv",
                body=modifier_engine.rows_to_csv(result.rows),
                stage_trace=trace,
                subject=subject,
            )
        # json and raw-without-payload both fall back to the JSON array shape
        body = json.dumps(result.rows).encode("utf-8")
        return RequestOutcome(200, body=body, stage_trace=trace, subject=subject)

    @staticmethod
    def _outcome(
        status: int, error: str, detail: str, trace, subject: str
    ) -> RequestOutcome:
        if status == 200:
            return RequestOutcome(200, stage_trace=trace, subject=subject)
        return RequestOutcome(
            status,
            body=_error_body(error, detail),
            stage_trace=trace,
            subject=subject,
        )
