"""Composable request/response modifier chains.

Three stages exist, mirroring the endpoint lifecycle: query modifiers run
before backend execution, result modifiers after it (for every endpoint
kind), and payload modifiers transform submit bodies before the provider
sees them. Chains fold left-to-right; an empty chain is the identity.
Failure policy is fail-closed: modifiers implement access control, so any
modifier error aborts the request.
"""

from __future__ import annotations

import csv
import io
import json
import threading
from dataclasses import dataclass, field
from typing import Callable

from .errors import (
    ChainDepthExceeded,
    GatewayError,
    ModifierFailure,
    ModifierRejected,
    NotFound,
    TargetNotFound,
)
from .model import Endpoint, ModifierRef
from .providers import ProviderResult
from .security import Principal
from .templates import BoundQuery

DEFAULT_MAX_CHAIN_DEPTH = 4


@dataclass
class ModifierContext:
    """Per-request state passed through every modifier.

    ``invoke`` is installed by the gateway and runs a nested endpoint
    through the full pipeline (used by the output chainer); ``depth``
    counts nesting to guard against cycles.
    """

    principal: Principal
    endpoint: Endpoint
    request_headers: dict[str, str] = field(default_factory=dict)
    stage_trace: list[tuple[str, str]] = field(default_factory=list)
    invoke: Callable | None = None
    depth: int = 0
    max_chain_depth: int = DEFAULT_MAX_CHAIN_DEPTH

    def record(self, modifier_id: str, stage: str) -> None:
        self.stage_trace.append((modifier_id, stage))


class ModifierRegistry:
    """modifierId -> modifier instance; instances must be stateless."""

    def __init__(self) -> None:
        self._modifiers: dict[str, object] = {}
        self._lock = threading.Lock()

    def register(self, modifier_id: str, modifier) -> None:
        with self._lock:
            self._modifiers[modifier_id] = modifier

    def resolve(self, modifier_id: str):
        with self._lock:
            modifier = self._modifiers.get(modifier_id)
        if modifier is None:
            raise ModifierFailure(f"unknown modifier: {modifier_id!r}")
        return modifier

    def ids(self) -> list[str]:
        with self._lock:
            return sorted(self._modifiers)


def _apply_stage(
    registry: ModifierRegistry,
    chain: tuple[ModifierRef, ...],
    value,
    ctx: ModifierContext,
    stage: str,
    method_name: str,
):
    for ref in chain:
        modifier = registry.resolve(ref.modifier_id)
        method = getattr(modifier, method_name, None)
        if method is None:
            raise ModifierFailure(
                f"modifier {ref.modifier_id!r} does not support the {stage} stage"
            )
        ctx.record(ref.modifier_id, stage)
        try:
            value = method(value, ref.config, ctx)
        except (ModifierRejected, ModifierFailure):
            raise
        except GatewayError as exc:
            raise ModifierFailure(f"{ref.modifier_id}: {exc}") from exc
        except Exception as exc:
            raise ModifierFailure(f"{ref.modifier_id}: {exc}") from exc
    return value


def apply_query_chain(
    registry: ModifierRegistry,
    chain: tuple[ModifierRef, ...],
    query: BoundQuery,
    ctx: ModifierContext,
) -> BoundQuery:
    return _apply_stage(registry, chain, query, ctx, "query", "apply_query")


def apply_result_chain(
    registry: ModifierRegistry,
    chain: tuple[ModifierRef, ...],
    result: ProviderResult,
    ctx: ModifierContext,
) -> ProviderResult:
    return _apply_stage(registry, chain, result, ctx, "result", "apply_result")


def apply_payload_chain(
    registry: ModifierRegistry,
    chain: tuple[ModifierRef, ...],
    payload: bytes,
    ctx: ModifierContext,
) -> bytes:
    return _apply_stage(registry, chain, payload, ctx, "payload", "apply_payload")


# --- built-in modifiers ---------------------------------------------------------

class IdentityModifier:
    """No-op at every stage; useful as a chain placeholder."""

    def apply_query(self, query, config, ctx):
        return query

    def apply_result(self, result, config, ctx):
        return result

    def apply_payload(self, payload, config, ctx):
        return payload


class RoleFilterModifier:
    """Entry-level access control on one bound attribute.

    Config: ``attribute`` names the bind variable carrying the controlled
    attribute; ``roleMap`` is a JSON object mapping role -> list of allowed
    values ("*" allows any). A request whose bound value is not allowed for
    any of the caller's roles is rejected before the backend runs.
    """

    def apply_query(self, query: BoundQuery, config, ctx: ModifierContext) -> BoundQuery:
        attribute = config.get("attribute")
        if not attribute:
            raise ModifierFailure("role-filter requires an 'attribute' config key")
        try:
            role_map = json.loads(config.get("roleMap", "{}"))
        except ValueError as exc:
            raise ModifierFailure(f"role-filter roleMap is not JSON: {exc}") from exc
        value = query.applied_params.get(attribute)
        if value is None:
            raise ModifierRejected(
                f"query does not bind controlled attribute {attribute!r}"
            )
        allowed: set[str] = set()
        for role in ctx.principal.roles:
            for entry in role_map.get(role, []):
                allowed.add(str(entry))
        if "*" in allowed or value in allowed:
            return query
        raise ModifierRejected(
            f"role(s) {sorted(ctx.principal.roles)} may not access "
            f"{attribute}={value!r}"
        )


class FieldRedactionModifier:
    """Drops named fields from every result row. Config: ``drop`` (comma list)."""

    def apply_result(self, result: ProviderResult, config, ctx) -> ProviderResult:
        drop = {name.strip() for name in config.get("drop", "").split(",") if name.strip()}
        if not drop or not result.rows:
            return result
        rows = [{k: v for k, v in row.items() if k not in drop} for row in result.rows]
        return ProviderResult(
            status=result.status,
            rows=rows,
            content_type=result.content_type,
            affected_count=result.affected_count,
            error_status=result.error_status,
            error_message=result.error_message,
        )


def rows_to_csv(rows: list[dict]) -> bytes:
    """Render rows as CSV with deterministic column order.

    Columns follow first-row key order; keys appearing only in later rows
    are appended in encounter order.
    """
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([row.get(col, "") for col in columns])
    return buffer.getvalue().encode("utf-8")


class CsvFormatterModifier:
    """Formats result rows as a text/csv payload."""

    def apply_result(self, result: ProviderResult, config, ctx) -> ProviderResult:
        if result.binary_payload is not None:
            return result
        return ProviderResult(
            status=result.status,
            rows=[],
            content_type="text/csv",
            binary_payload=rows_to_csv(result.rows),
            affected_count=result.affected_count,
        )


class JsonFieldScrubModifier:
    """Replaces one top-level JSON field in a submit payload.

    Config: ``scrubField`` (required), ``replacement`` (default REDACTED).
    """

    def apply_payload(self, payload: bytes, config, ctx) -> bytes:
        field_name = config.get("scrubField")
        if not field_name:
            raise ModifierFailure("json-field-scrub requires a 'scrubField' config key")
        try:
            document = json.loads(payload.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise ModifierFailure(f"payload is not JSON: {exc}") from exc
        if isinstance(document, dict) and field_name in document:
            document[field_name] = config.get("replacement", "REDACTED")
        return json.dumps(document, separators=(",", ":")).encode("utf-8")


class OutputChainerModifier:
    """Feeds each result row into another endpoint, forming a workflow.

    Config: ``nextProject``, ``nextProvider``, ``nextEndpoint``, ``paramField``,
    optional ``nextKind`` (default query). The nested call runs through the
    full pipeline under the same principal; results are the concatenation of
    the per-row target results, so intermediate outcomes never hit storage.
    """

    def apply_result(self, result: ProviderResult, config, ctx: ModifierContext) -> ProviderResult:
        for key in ("nextProject", "nextProvider", "nextEndpoint", "paramField"):
            if not config.get(key):
                raise ModifierFailure(f"output-chainer requires config key {key!r}")
        if ctx.invoke is None:
            raise ModifierFailure("output chaining is unavailable outside the gateway")
        if ctx.depth + 1 > ctx.max_chain_depth:
            raise ChainDepthExceeded(
                f"chain depth {ctx.depth + 1} exceeds maximum {ctx.max_chain_depth}"
            )
        param_field = config["paramField"]
        kind = config.get("nextKind", "query")
        combined: list[dict] = []
        for row in result.rows:
            if param_field not in row:
                raise ModifierFailure(
                    f"row is missing chained field {param_field!r}: {sorted(row)}"
                )
            try:
                inner = ctx.invoke(
                    project=config["nextProject"],
                    provider=config["nextProvider"],
                    kind=kind,
                    endpoint_name=config["nextEndpoint"],
                    params={param_field: str(row[param_field])},
                    principal=ctx.principal,
                    headers=ctx.request_headers,
                    depth=ctx.depth + 1,
                )
            except NotFound as exc:
                raise TargetNotFound(str(exc)) from exc
            combined.extend(inner.rows)
        return ProviderResult(
            status="ok" if combined else "empty",
            rows=combined,
            content_type="application/json",
        )


def builtin_modifiers() -> ModifierRegistry:
    registry = ModifierRegistry()
    registry.register("identity", IdentityModifier())
    registry.register("role-filter", RoleFilterModifier())
    registry.register("field-redaction", FieldRedactionModifier())
    registry.register("csv-formatter", CsvFormatterModifier())
    registry.register("json-field-scrub", JsonFieldScrubModifier())
    registry.register("output-chainer", OutputChainerModifier())
    return registry
