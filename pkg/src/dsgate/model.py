"""Declarative data model: projects, provider profiles, endpoints, config.

Project files and the server configuration are JSON documents; parsing here
is deliberately tolerant of trailing commas (documents written by hand often
carry them) but strict about the schema itself. All model values are
immutable after construction so request handlers can share them freely;
mutation happens only by swapping a whole Project through the registry.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field

from .errors import InvalidDescriptor, MalformedDocument, SchemaViolation
from .templates import BindVariable, QueryTemplate, extract_bind_variables

ENDPOINT_KINDS = ("query", "submit", "update", "delete")
OUTPUT_FORMATS = ("json", "csv", "raw")
AUTH_PROTOCOLS = ("api_key", "jwt")
PROTOCOLS = ("http", "https")
SUBMIT_TYPES = ("FORM_DATA", "RAW")
SUBMIT_INPUT_TYPES = ("CSV", "JSON")

_SEGMENT_RE = re.compile(r"[A-Za-z0-9_.~-]+")

_ENV_REF_RE = re.compile(r"\$\{ENV:([A-Za-z_][A-Za-z0-9_]*)\}")


def _check_segment(value: str, what: str) -> str:
    if not isinstance(value, str) or not _SEGMENT_RE.fullmatch(value):
        raise SchemaViolation(f"{what} must be a legal URL path segment, got {value!r}")
    return value


def loads_tolerant(text: str | bytes):
    """json.loads that additionally accepts trailing commas before } or ]."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        return json.loads(text, object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError:
        pass
    try:
        return json.loads(
            _strip_trailing_commas(text), object_pairs_hook=_reject_duplicate_keys
        )
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"invalid JSON: {exc}") from exc


def _reject_duplicate_keys(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise SchemaViolation(f"duplicate key {key!r} in JSON object")
        out[key] = value
    return out


def _strip_trailing_commas(text: str) -> str:
    out = []
    in_string = False
    escaped = False
    i = 0
    while i < len(text):
        ch = text[i]
        if in_string:
            out.append(ch)
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            i += 1
            continue
        if ch == '"':
            in_string = True
            out.append(ch)
            i += 1
            continue
        if ch == ",":
            j = i + 1
            while j < len(text) and text[j] in " \t\r\n":
                j += 1
            if j < len(text) and text[j] in "}]":
                i += 1  # drop the comma, keep the whitespace
                continue
        out.append(ch)
        i += 1
    return "".join(out)


# --- rate limiting policy (configured here, enforced by security) -------------

@dataclass(frozen=True)
class RateLimitPolicy:
    requests_per_window: int
    window_seconds: int
    scope: str = "perPrincipal"
    per_role_overrides: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.requests_per_window <= 0 or self.window_seconds <= 0:
            raise SchemaViolation("rate limit window and count must be positive")
        if self.scope not in ("perPrincipal", "perRole"):
            raise SchemaViolation(f"unknown rate limit scope: {self.scope!r}")
        if self.per_role_overrides and self.scope != "perRole":
            raise SchemaViolation("perRoleOverrides require scope perRole")


# --- server configuration ------------------------------------------------------

@dataclass(frozen=True)
class ServerConfig:
    """Server-wide settings parsed from the JSON configuration file."""

    host: str
    service_port: int
    console_port: int
    protocol: str = "http"
    enable_authentication: bool = True
    enable_authorization: bool = False
    enable_audit: bool = True
    authentication_protocol: str = "api_key"
    authentication_provider_class: str = ""
    authorization_provider_class: str = ""
    audit_provider_class: str = ""
    proxy_url: str = ""
    instance_name: str = "dsgate"
    auth_cache_ttl_seconds: int = 300
    rate_limit: RateLimitPolicy | None = None
    jwt_public_key_path: str = ""
    jwt_private_key_path: str = ""
    store_path: str = "dsgate.db"
    log_directory: str = "logs"
    audit_mode: str = "buffered"
    audit_flush_seconds: float = 1.0
    external_tls_terminator: bool = False
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        # port 0 asks the OS for an ephemeral port, so two zeros still end
        # up on distinct listeners
        if self.service_port == self.console_port and self.service_port != 0:
            raise SchemaViolation("servicePort and consolePort must differ")
        for port, label in ((self.service_port, "port"), (self.console_port, "consolePort")):
            if not isinstance(port, int) or not 0 <= port <= 65535:
                raise SchemaViolation(f"{label} must be a TCP port, got {port!r}")
        if self.protocol not in PROTOCOLS:
            raise SchemaViolation(f"unknown protocol: {self.protocol!r}")
        if self.authentication_protocol not in AUTH_PROTOCOLS:
            raise SchemaViolation(
                f"unknown authenticationProtocol: {self.authentication_protocol!r}"
            )
        if self.enable_authorization and not self.enable_authentication:
            raise SchemaViolation("enableAuthorization requires enableAuthentication")
        if self.auth_cache_ttl_seconds < 0:
            raise SchemaViolation("authCacheTtlSeconds must be non-negative")
        if self.audit_mode not in ("buffered", "durable"):
            raise SchemaViolation(f"unknown auditMode: {self.audit_mode!r}")
        if not 0 < self.audit_flush_seconds <= 1.0:
            raise SchemaViolation("auditFlushSeconds must be in (0, 1]")


_CONFIG_KEYS = {
    "host", "port", "consolePort", "protocol", "enableAuthentication",
    "enableAuthorization", "enableAudit", "authenticationProtocol",
    "authenticationProviderClass", "authorizationProviderClass",
    "auditProviderClass", "proxyUrl", "instanceName", "authCacheTtlSeconds",
    "rateLimit", "jwtPublicKeyPath", "jwtPrivateKeyPath", "storePath",
    "logDirectory", "auditMode", "auditFlushSeconds", "externalTlsTerminator",
}


def parse_server_config(data: bytes | str) -> ServerConfig:
    """Parse the JSON server configuration, applying documented defaults."""
    doc = loads_tolerant(data)
    if not isinstance(doc, dict):
        raise SchemaViolation("configuration must be a JSON object")
    if "host" not in doc or "port" not in doc:
        raise SchemaViolation("host and port are mandatory")

    port = doc["port"]
    if not isinstance(port, int):
        raise SchemaViolation(f"port must be an integer, got {port!r}")

    rate_limit = None
    if doc.get("rateLimit") is not None:
        rl = doc["rateLimit"]
        if not isinstance(rl, dict):
            raise SchemaViolation("rateLimit must be an object")
        rate_limit = RateLimitPolicy(
            requests_per_window=rl.get("requestsPerWindow", 0),
            window_seconds=rl.get("windowSeconds", 0),
            scope=rl.get("scope", "perPrincipal"),
            per_role_overrides=dict(rl.get("perRoleOverrides", {})),
        )

    extras = {k: v for k, v in doc.items() if k not in _CONFIG_KEYS}
    return ServerConfig(
        host=str(doc["host"]),
        service_port=port,
        console_port=doc.get("consolePort", port + 1),
        protocol=doc.get("protocol", "http"),
        enable_authentication=bool(doc.get("enableAuthentication", True)),
        enable_authorization=bool(doc.get("enableAuthorization", False)),
        enable_audit=bool(doc.get("enableAudit", True)),
        authentication_protocol=doc.get("authenticationProtocol", "api_key"),
        authentication_provider_class=doc.get("authenticationProviderClass", ""),
        authorization_provider_class=doc.get("authorizationProviderClass", ""),
        audit_provider_class=doc.get("auditProviderClass", ""),
        proxy_url=doc.get("proxyUrl", ""),
        instance_name=doc.get("instanceName", "dsgate"),
        auth_cache_ttl_seconds=doc.get("authCacheTtlSeconds", 300),
        rate_limit=rate_limit,
        jwt_public_key_path=doc.get("jwtPublicKeyPath", ""),
        jwt_private_key_path=doc.get("jwtPrivateKeyPath", ""),
        store_path=doc.get("storePath", "dsgate.db"),
        log_directory=doc.get("logDirectory", "logs"),
        audit_mode=doc.get("auditMode", "buffered"),
        audit_flush_seconds=doc.get("auditFlushSeconds", 1.0),
        external_tls_terminator=bool(doc.get("externalTlsTerminator", False)),
        extras=extras,
    )


# --- access rules ----------------------------------------------------------------

@dataclass(frozen=True)
class AccessRule:
    """Role gate for one endpoint; empty roles means any authenticated caller."""

    allowed_roles: frozenset[str] = frozenset()
    attribute_filter: tuple[str, frozenset[str]] | None = None


# --- connection descriptors -------------------------------------------------------

@dataclass(frozen=True)
class ConnectionDescriptor:
    """Provider-interpreted connection properties.

    Values may reference environment variables with ``${ENV:NAME}``; the
    reference is kept verbatim in the model and resolved only when a
    provider connects, so serialized project files never leak secrets.
    """

    properties: dict[str, str] = field(default_factory=dict)
    initialize: bool = False

    def resolved_properties(self) -> dict[str, str]:
        resolved = {}
        for key, value in self.properties.items():
            def _sub(match: re.Match) -> str:
                name = match.group(1)
                if name not in os.environ:
                    raise InvalidDescriptor(
                        f"environment variable {name} referenced by "
                        f"dataSource.{key} is not set"
                    )
                return os.environ[name]

            resolved[key] = _ENV_REF_RE.sub(_sub, value)
        return resolved


# --- endpoints ---------------------------------------------------------------------

@dataclass(frozen=True)
class ModifierRef:
    modifier_id: str
    config: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Endpoint:
    """One named API of a provider profile.

    Submit endpoints may omit the query template entirely (the payload is
    the unit of work); every other kind normally carries one.
    """

    name: str
    kind: str
    query_template: QueryTemplate = QueryTemplate()
    output_format: str = "json"
    metadata: dict[str, str] = field(default_factory=dict)
    query_modifiers: tuple[ModifierRef, ...] = ()
    result_modifiers: tuple[ModifierRef, ...] = ()
    payload_modifiers: tuple[ModifierRef, ...] = ()
    visibility: AccessRule | None = None
    submit_type: str = ""
    extras: dict = field(default_factory=dict, compare=True)

    def __post_init__(self) -> None:
        _check_segment(self.name, "endpoint name")
        if self.kind not in ENDPOINT_KINDS:
            raise SchemaViolation(f"unknown endpoint kind: {self.kind!r}")
        if self.output_format not in OUTPUT_FORMATS:
            raise SchemaViolation(f"unknown outputFormat: {self.output_format!r}")
        if self.payload_modifiers and self.kind != "submit":
            raise SchemaViolation("payloadModifiers are only legal on submit endpoints")
        if self.submit_type:
            if self.kind != "submit":
                raise SchemaViolation("type is only legal on submit endpoints")
            if self.submit_type not in SUBMIT_TYPES:
                raise SchemaViolation(f"unknown submit type: {self.submit_type!r}")

    @property
    def timeout_seconds(self) -> float:
        return float(self.metadata.get("timeoutSeconds", 30.0))


# --- provider profiles and projects -------------------------------------------------

@dataclass(frozen=True)
class DataProviderProfile:
    name: str
    provider_id: str
    data_source: ConnectionDescriptor = field(default_factory=ConnectionDescriptor)
    query_endpoints: dict[str, Endpoint] = field(default_factory=dict)
    submit_endpoints: dict[str, Endpoint] = field(default_factory=dict)
    update_endpoints: dict[str, Endpoint] = field(default_factory=dict)
    delete_endpoints: dict[str, Endpoint] = field(default_factory=dict)

    def __post_init__(self) -> None:
        _check_segment(self.name, "profile name")
        if not self.provider_id:
            raise SchemaViolation(f"profile {self.name!r} is missing providerId")

    def endpoints_of_kind(self, kind: str) -> dict[str, Endpoint]:
        return {
            "query": self.query_endpoints,
            "submit": self.submit_endpoints,
            "update": self.update_endpoints,
            "delete": self.delete_endpoints,
        }[kind]


@dataclass(frozen=True)
class Project:
    name: str
    profiles: dict[str, DataProviderProfile] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        _check_segment(self.name, "project name")
        if not self.profiles:
            raise SchemaViolation(f"project {self.name!r} has no servable profile")


_ENDPOINT_KIND_KEYS = (
    ("queryEndpoints", "query"),
    ("submitEndpoints", "submit"),
    ("updateEndpoints", "update"),
    ("deleteEndpoints", "delete"),
)

_PROFILE_KEYS = {"providerId", "dataSource"} | {k for k, _ in _ENDPOINT_KIND_KEYS}

_ENDPOINT_KEYS = {
    "name", "queryTemplate", "bindVariables", "outputFormat", "metadata",
    "queryModifiers", "resultModifiers", "payloadModifiers", "visibility",
    "type",
}


def _parse_modifier_refs(value, what: str) -> tuple[ModifierRef, ...]:
    if value is None:
        return ()
    if not isinstance(value, list):
        raise SchemaViolation(f"{what} must be a list")
    refs = []
    for entry in value:
        if isinstance(entry, str):
            refs.append(ModifierRef(entry))
        elif isinstance(entry, dict) and "modifierId" in entry:
            config = entry.get("config", {})
            refs.append(ModifierRef(entry["modifierId"], {str(k): str(v) for k, v in config.items()}))
        else:
            raise SchemaViolation(f"bad modifier reference in {what}: {entry!r}")
    return tuple(refs)


def _parse_visibility(value) -> AccessRule | None:
    if value is None:
        return None
    if not isinstance(value, dict):
        raise SchemaViolation("visibility must be an object")
    attribute_filter = None
    if value.get("attributeFilter") is not None:
        af = value["attributeFilter"]
        attribute_filter = (str(af["attribute"]), frozenset(str(v) for v in af["values"]))
    return AccessRule(
        allowed_roles=frozenset(str(r) for r in value.get("allowedRoles", [])),
        attribute_filter=attribute_filter,
    )


def _parse_bind_variables(template_text: str, declared) -> tuple[BindVariable, ...]:
    if declared is None:
        # Undeclared: every placeholder becomes a required string parameter.
        return tuple(BindVariable(n) for n in extract_bind_variables(template_text))
    if not isinstance(declared, list):
        raise SchemaViolation("bindVariables must be a list")
    out = []
    for entry in declared:
        if isinstance(entry, str):
            out.append(BindVariable(entry))
            continue
        if not isinstance(entry, dict) or "name" not in entry:
            raise SchemaViolation(f"bad bind variable declaration: {entry!r}")
        out.append(
            BindVariable(
                name=entry["name"],
                required=bool(entry.get("required", "default" not in entry)),
                default=entry.get("default"),
                type_hint=entry.get("typeHint", "string"),
            )
        )
    return tuple(out)


def _parse_endpoint(name: str, kind: str, doc: dict) -> Endpoint:
    if not isinstance(doc, dict):
        raise SchemaViolation(f"endpoint {name!r} must be an object")
    if "name" in doc and doc["name"] != name:
        raise SchemaViolation(
            f"endpoint key {name!r} disagrees with its name field {doc['name']!r}"
        )
    template_text = doc.get("queryTemplate", "")
    if not isinstance(template_text, str):
        raise SchemaViolation(f"queryTemplate of {name!r} must be a string")
    template = QueryTemplate(
        template_text, _parse_bind_variables(template_text, doc.get("bindVariables"))
    )
    metadata = {str(k): str(v) for k, v in (doc.get("metadata") or {}).items()}
    extras = {k: v for k, v in doc.items() if k not in _ENDPOINT_KEYS}
    submit_type = str(doc.get("type", "")) if kind == "submit" else ""
    if submit_type:
        input_type = (extras.get("properties") or {}).get("inputType") if isinstance(extras.get("properties"), dict) else None
        if input_type is not None and input_type not in SUBMIT_INPUT_TYPES:
            raise SchemaViolation(f"unknown submit inputType: {input_type!r}")
    return Endpoint(
        name=name,
        kind=kind,
        query_template=template,
        output_format=doc.get("outputFormat", "json"),
        metadata=metadata,
        query_modifiers=_parse_modifier_refs(doc.get("queryModifiers"), "queryModifiers"),
        result_modifiers=_parse_modifier_refs(doc.get("resultModifiers"), "resultModifiers"),
        payload_modifiers=_parse_modifier_refs(doc.get("payloadModifiers"), "payloadModifiers"),
        visibility=_parse_visibility(doc.get("visibility")),
        submit_type=submit_type,
        extras=extras,
    )


def _parse_data_source(doc) -> ConnectionDescriptor:
    if doc is None:
        return ConnectionDescriptor()
    if not isinstance(doc, dict):
        raise SchemaViolation("dataSource must be an object")
    properties = {}
    initialize = False
    for key, value in doc.items():
        if key == "initialize":
            initialize = bool(value)
            continue
        if isinstance(value, (dict, list)):
            raise SchemaViolation(f"dataSource.{key} must be a scalar")
        if isinstance(value, bool):
            value = "true" if value else "false"
        properties[str(key)] = str(value)
    return ConnectionDescriptor(properties=properties, initialize=initialize)


def _parse_profile(name: str, doc: dict) -> DataProviderProfile:
    if not isinstance(doc, dict):
        raise SchemaViolation(f"profile {name!r} must be an object")
    if not doc.get("providerId"):
        raise SchemaViolation(f"profile {name!r} is missing providerId")
    kinds: dict[str, dict[str, Endpoint]] = {}
    for json_key, kind in _ENDPOINT_KIND_KEYS:
        endpoints = {}
        for ep_name, ep_doc in (doc.get(json_key) or {}).items():
            endpoints[ep_name] = _parse_endpoint(ep_name, kind, ep_doc)
        kinds[kind] = endpoints
    return DataProviderProfile(
        name=name,
        provider_id=str(doc["providerId"]),
        data_source=_parse_data_source(doc.get("dataSource")),
        query_endpoints=kinds["query"],
        submit_endpoints=kinds["submit"],
        update_endpoints=kinds["update"],
        delete_endpoints=kinds["delete"],
    )


def parse_project_file(data: bytes | str, name: str | None = None) -> Project:
    """Parse and validate a JSON project file.

    The project name comes from the document's ``name`` key when present,
    otherwise from the ``name`` argument (callers loading from disk pass
    the file stem). Unknown top-level keys are preserved for round-tripping.
    """
    doc = loads_tolerant(data)
    if not isinstance(doc, dict):
        raise SchemaViolation("project file must be a JSON object")
    profiles_doc = doc.get("profiles")
    if not isinstance(profiles_doc, dict) or not profiles_doc:
        raise SchemaViolation("project has no servable profile")
    profiles = {
        prof_name: _parse_profile(prof_name, prof_doc)
        for prof_name, prof_doc in profiles_doc.items()
    }
    project_name = doc.get("name") or name
    if not project_name:
        raise SchemaViolation("project name missing (no name key and none supplied)")
    extras = {k: v for k, v in doc.items() if k not in ("name", "profiles")}
    return Project(name=str(project_name), profiles=profiles, extras=extras)


def _bind_variable_doc(bv: BindVariable) -> dict:
    out: dict = {"name": bv.name}
    if not bv.required:
        out["required"] = False
        out["default"] = bv.default
    if bv.type_hint != "string":
        out["typeHint"] = bv.type_hint
    return out


def _modifier_doc(ref: ModifierRef) -> dict:
    out: dict = {"modifierId": ref.modifier_id}
    if ref.config:
        out["config"] = dict(ref.config)
    return out


def _endpoint_doc(ep: Endpoint) -> dict:
    out: dict = {"name": ep.name}
    if ep.submit_type:
        out["type"] = ep.submit_type
    if ep.query_template.text or ep.query_template.bind_variables:
        out["queryTemplate"] = ep.query_template.text
        if ep.query_template.bind_variables:
            out["bindVariables"] = [
                _bind_variable_doc(bv) for bv in ep.query_template.bind_variables
            ]
    if ep.output_format != "json":
        out["outputFormat"] = ep.output_format
    if ep.metadata:
        out["metadata"] = dict(ep.metadata)
    if ep.query_modifiers:
        out["queryModifiers"] = [_modifier_doc(m) for m in ep.query_modifiers]
    if ep.result_modifiers:
        out["resultModifiers"] = [_modifier_doc(m) for m in ep.result_modifiers]
    if ep.payload_modifiers:
        out["payloadModifiers"] = [_modifier_doc(m) for m in ep.payload_modifiers]
    if ep.visibility is not None:
        vis: dict = {"allowedRoles": sorted(ep.visibility.allowed_roles)}
        if ep.visibility.attribute_filter is not None:
            attr, values = ep.visibility.attribute_filter
            vis["attributeFilter"] = {"attribute": attr, "values": sorted(values)}
        out["visibility"] = vis
    out.update(ep.extras)
    return out


def _data_source_doc(ds: ConnectionDescriptor) -> dict:
    out: dict = dict(ds.properties)
    out["initialize"] = ds.initialize
    return out


def _profile_doc(profile: DataProviderProfile) -> dict:
    out: dict = {"providerId": profile.provider_id}
    if profile.data_source.properties or profile.data_source.initialize:
        out["dataSource"] = _data_source_doc(profile.data_source)
    for json_key, kind in _ENDPOINT_KIND_KEYS:
        endpoints = profile.endpoints_of_kind(kind)
        if endpoints:
            out[json_key] = {name: _endpoint_doc(ep) for name, ep in endpoints.items()}
    return out


def serialize_project_file(project: Project) -> bytes:
    """Serialize a project back to UTF-8 JSON with stable key ordering."""
    doc: dict = {"name": project.name}
    doc["profiles"] = {
        name: _profile_doc(profile) for name, profile in project.profiles.items()
    }
    doc.update(project.extras)
    return (json.dumps(doc, indent=2, sort_keys=False) + "\n").encode("utf-8")
