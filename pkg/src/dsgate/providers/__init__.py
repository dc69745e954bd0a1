"""Datasource provider SPI: the contract between the gateway and backends.

A provider translates endpoint executions into one backend's protocol. The
registry resolves ``providerId`` strings from project files to provider
instances. Three concrete providers ship here: an embedded SQL store, an
HTTP pass-through, and a deterministic mock for pipeline tests; networked
DBMS adapters plug in through the same base classes.
"""

from __future__ import annotations

import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

from ..errors import DuplicateProviderId, UnknownProvider
from ..model import ConnectionDescriptor, Endpoint
from ..templates import BoundQuery, substitute

KINDS_ALL = frozenset({"query", "submit", "update", "delete"})


@dataclass(frozen=True)
class ProviderDescriptor:
    provider_id: str
    version: str = "0.1.0"
    supported_endpoint_kinds: frozenset[str] = KINDS_ALL
    default_substitution_mode: str = "raw"


@dataclass
class ProviderResult:
    """Outcome of one endpoint execution.

    ``rows`` are ordered field-name -> value maps so CSV output has a
    deterministic column order. A binary payload and rows are mutually
    exclusive; ``affected_count`` is set only by mutating kinds.
    """

    status: str = "ok"
    rows: list[dict] = field(default_factory=list)
    content_type: str = "application/json"
    binary_payload: bytes | None = None
    affected_count: int | None = None
    error_status: int | None = None
    error_message: str = ""

    def __post_init__(self) -> None:
        if self.status not in ("ok", "empty", "error"):
            raise ValueError(f"bad provider status: {self.status!r}")
        if self.binary_payload is not None and self.rows:
            raise ValueError("binary payload and rows are mutually exclusive")


class Provider(ABC):
    """Base class for datasource providers."""

    descriptor: ProviderDescriptor

    @abstractmethod
    def connect(self, descriptor: ConnectionDescriptor):
        """Return a live, reusable connection handle for this descriptor.

        Connecting twice with an equal descriptor may return the same
        handle; pooling lives behind the handle.
        """

    @abstractmethod
    def execute(
        self,
        handle,
        kind: str,
        bound_query: BoundQuery,
        payload: bytes | None = None,
        headers: dict[str, str] | None = None,
        timeout: float = 30.0,
    ) -> ProviderResult:
        """Run one endpoint execution; never rewrites bound_query.text."""

    def plan(self, endpoint: Endpoint, params: dict[str, str]) -> BoundQuery:
        """Bind request parameters into the endpoint's template."""
        return substitute(
            endpoint.query_template,
            params,
            mode=self.descriptor.default_substitution_mode,
        )


class ProviderRegistry:
    """Thread-safe providerId -> provider mapping.

    Registration happens at startup and during hot reload; lookups are
    read-mostly and cheap.
    """

    def __init__(self) -> None:
        self._providers: dict[str, Provider] = {}
        self._lock = threading.RLock()

    def register(self, provider: Provider) -> Provider:
        provider_id = provider.descriptor.provider_id
        with self._lock:
            if provider_id in self._providers:
                raise DuplicateProviderId(provider_id)
            self._providers[provider_id] = provider
        return provider

    def resolve(self, provider_id: str) -> Provider:
        with self._lock:
            try:
                return self._providers[provider_id]
            except KeyError:
                raise UnknownProvider(provider_id) from None

    def ids(self) -> list[str]:
        with self._lock:
            return sorted(self._providers)

    def __contains__(self, provider_id: str) -> bool:
        with self._lock:
            return provider_id in self._providers


def builtin_registry() -> ProviderRegistry:
    """Registry preloaded with the shipped providers."""
    from .http import HttpProvider
    from .mock import MockProvider
    from .sql import SqliteProvider

    registry = ProviderRegistry()
    registry.register(SqliteProvider())
    registry.register(HttpProvider())
    registry.register(MockProvider())
    return registry
