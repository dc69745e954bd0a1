"""Deterministic in-memory provider used as a pipeline oracle.

Contract: a query returns exactly one row ``{"echo": <query text>}``;
mutations report ``affected_count == 1``. The handle records every
execution so tests can assert pass-through fidelity.
"""

from __future__ import annotations

import threading

from ..model import ConnectionDescriptor
from ..templates import BoundQuery
from . import KINDS_ALL, Provider, ProviderDescriptor, ProviderResult


class MockHandle:
    def __init__(self, descriptor: ConnectionDescriptor):
        self.descriptor = descriptor
        self.executed: list[tuple[str, str, bytes | None]] = []
        self._lock = threading.Lock()

    def record(self, kind: str, text: str, payload: bytes | None) -> None:
        with self._lock:
            self.executed.append((kind, text, payload))


class MockProvider(Provider):
    def __init__(self, provider_id: str = "mock"):
        self.descriptor = ProviderDescriptor(
            provider_id=provider_id,
            supported_endpoint_kinds=KINDS_ALL,
            default_substitution_mode="raw",
        )
        self._handles: list[MockHandle] = []

    def connect(self, descriptor: ConnectionDescriptor) -> MockHandle:
        handle = MockHandle(descriptor)
        self._handles.append(handle)
        return handle

    def execute(
        self,
        handle: MockHandle,
        kind: str,
        bound_query: BoundQuery,
        payload: bytes | None = None,
        headers: dict[str, str] | None = None,
        timeout: float = 30.0,
    ) -> ProviderResult:
        handle.record(kind, bound_query.text, payload)
        if kind == "query":
            return ProviderResult(status="ok", rows=[{"echo": bound_query.text}])
        return ProviderResult(status="ok", affected_count=1)

    @property
    def handles(self) -> list[MockHandle]:
        return self._handles
