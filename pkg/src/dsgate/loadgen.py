"""Concurrent load harness: ramped workers, latency percentiles, time series.

Workers are plain threads with persistent HTTP connections; each keeps its
own samples and the merge happens once at the end, so there is no shared
mutable state on the hot path. The per-second series carries enough to
redraw response-time and throughput charts.
"""

from __future__ import annotations

import http.client
import socket
import threading
import time
from dataclasses import dataclass, field
from urllib.parse import urlsplit


@dataclass
class Sample:
    wall: float
    latency_micros: int
    status: int
    transport_error: bool = False


@dataclass
class SecondBucket:
    second: int
    completed: int
    errors: int
    p50_us: int
    p95_us: int


@dataclass
class LoadReport:
    total_requests: int
    completed: int
    transport_errors: int
    non_200: int
    wall_seconds: float
    min_us: int = 0
    p50_us: int = 0
    p95_us: int = 0
    p99_us: int = 0
    max_us: int = 0
    throughput_rps: float = 0.0
    series: list[SecondBucket] = field(default_factory=list)
    worker_start_walls: list[float] = field(default_factory=list)

    def summary_lines(self) -> list[str]:
        return [
            f"requests: {self.completed}/{self.total_requests} completed",
            f"errors:   {self.transport_errors} transport, {self.non_200} non-200",
            f"latency:  min {self.min_us} us | p50 {self.p50_us} us | "
            f"p95 {self.p95_us} us | p99 {self.p99_us} us | max {self.max_us} us",
            f"throughput: {self.throughput_rps:.1f} req/s over {self.wall_seconds:.1f}s",
        ]

    def series_csv(self) -> str:
        lines = ["second,completed,errors,p50_us,p95_us"]
        for bucket in self.series:
            lines.append(
                f"{bucket.second},{bucket.completed},{bucket.errors},"
                f"{bucket.p50_us},{bucket.p95_us}"
            )
        return "\n".join(lines) + "\n"


def percentile(sorted_values: list[int], fraction: float) -> int:
    """Nearest-rank percentile; callers pass a pre-sorted list."""
    if not sorted_values:
        return 0
    rank = max(1, min(len(sorted_values), round(fraction * len(sorted_values) + 0.5)))
    return sorted_values[rank - 1]


def probe_reachable(target: str, timeout: float = 3.0) -> bool:
    """TCP-level reachability check that leaves no trace in server audit."""
    parts = urlsplit(target)
    port = parts.port or (443 if parts.scheme == "https" else 80)
    try:
        with socket.create_connection((parts.hostname, port), timeout=timeout):
            return True
    except OSError:
        return False


class _Worker(threading.Thread):
    def __init__(self, target: str, quota: int, delay: float, headers: dict[str, str]):
        super().__init__(daemon=True)
        parts = urlsplit(target)
        self._host = parts.hostname
        self._port = parts.port or (443 if parts.scheme == "https" else 80)
        self._path = parts.path + ("?" + parts.query if parts.query else "")
        self._https = parts.scheme == "https"
        self.quota = quota
        self.delay = delay
        self.headers = headers
        self.samples: list[Sample] = []
        self.started_wall: float = 0.0

    def _connect(self):
        cls = http.client.HTTPSConnection if self._https else http.client.HTTPConnection
        return cls(self._host, self._port, timeout=30)

    def run(self) -> None:
        time.sleep(self.delay)
        self.started_wall = time.time()
        conn = self._connect()
        for _ in range(self.quota):
            wall = time.time()
            started = time.perf_counter()
            try:
                conn.request("GET", self._path, headers=self.headers)
                response = conn.getresponse()
                response.read()
                latency = int((time.perf_counter() - started) * 1_000_000)
                self.samples.append(Sample(wall, latency, response.status))
            except (OSError, http.client.HTTPException):
                latency = int((time.perf_counter() - started) * 1_000_000)
                self.samples.append(Sample(wall, latency, 0, transport_error=True))
                conn.close()
                conn = self._connect()
        conn.close()


def run_load(
    target: str,
    users: int,
    rampup_seconds: float,
    total_requests: int,
    headers: dict[str, str] | None = None,
) -> LoadReport:
    """Ramp ``users`` workers over ``rampup_seconds`` and issue
    ``total_requests`` GETs against ``target``."""
    headers = headers or {}
    base, remainder = divmod(total_requests, users)
    quotas = [base + (1 if i < remainder else 0) for i in range(users)]
    step = rampup_seconds / users if users else 0.0
    workers = [
        _Worker(target, quota, delay=i * step, headers=headers)
        for i, quota in enumerate(quotas)
        if quota > 0
    ]
    started = time.time()
    for worker in workers:
        worker.start()
    for worker in workers:
        worker.join()
    wall = time.time() - started

    samples = [s for w in workers for s in w.samples]
    latencies = sorted(s.latency_micros for s in samples if not s.transport_error)
    report = LoadReport(
        total_requests=total_requests,
        completed=len(samples),
        transport_errors=sum(1 for s in samples if s.transport_error),
        non_200=sum(1 for s in samples if not s.transport_error and s.status != 200),
        wall_seconds=wall,
        worker_start_walls=[w.started_wall for w in workers],
    )
    if latencies:
        report.min_us = latencies[0]
        report.p50_us = percentile(latencies, 0.50)
        report.p95_us = percentile(latencies, 0.95)
        report.p99_us = percentile(latencies, 0.99)
        report.max_us = latencies[-1]
    if wall > 0:
        report.throughput_rps = len(samples) / wall

    buckets: dict[int, list[Sample]] = {}
    for sample in samples:
        buckets.setdefault(int(sample.wall - started), []).append(sample)
    for second in sorted(buckets):
        in_bucket = buckets[second]
        bucket_latencies = sorted(
            s.latency_micros for s in in_bucket if not s.transport_error
        )
        report.series.append(
            SecondBucket(
                second=second,
                completed=len(in_bucket),
                errors=sum(
                    1 for s in in_bucket if s.transport_error or s.status != 200
                ),
                p50_us=percentile(bucket_latencies, 0.50),
                p95_us=percentile(bucket_latencies, 0.95),
            )
        )
    return report
