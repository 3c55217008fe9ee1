"""Remaining-quota retrieval across heterogeneous operator mechanisms.

Real operators expose quota via SMS, USSD or vendor apps; those backends are
abstracted behind three adapter kinds: an HTTP API (the simulated operator),
an external command, and a watched file.  All adapters rate-limit, normalize
to the reporting granularity and carry staleness metadata.
"""

from __future__ import annotations

import json
import re
import subprocess
import time
import urllib.request
from dataclasses import dataclass, field

from . import ZrAuditError

SIMULATED_API = "simulated-api"
SCRIPTED_COMMAND = "scripted-command"
FILE_WATCH = "file-watch"

MIN_POLL_INTERVAL = 1.0  # ethics: never hammer an operator's credit channel
BACKOFF_FACTOR = 2.0
BACKOFF_CAP = 60.0

_LINE_RE = re.compile(r"remaining_bytes=(\d+)\s+granularity_bytes=(\d+)")


class QuotaError(ZrAuditError):
    pass


class RateLimited(QuotaError):
    """fetch_quota called before min_poll_interval elapsed (caller bug)."""


class SourceUnavailable(QuotaError):
    pass


class ParseFailure(QuotaError):
    """Raw response did not match the adapter's extraction pattern."""


@dataclass(frozen=True)
class QuotaSnapshot:
    """Point-in-time remaining-quota reading."""

    remaining: int
    granularity: int
    taken_at: float
    source: str
    staleness_bound: float = 0.0


@dataclass(frozen=True)
class AdapterSpec:
    kind: str
    parameters: dict = field(default_factory=dict)
    min_poll_interval: float = MIN_POLL_INTERVAL
    staleness_bound: float = 0.0

    def __post_init__(self):
        if self.kind not in (SIMULATED_API, SCRIPTED_COMMAND, FILE_WATCH):
            raise QuotaError(f"unknown adapter kind {self.kind!r}")
        if self.min_poll_interval < MIN_POLL_INTERVAL:
            raise QuotaError(
                f"min_poll_interval must be >= {MIN_POLL_INTERVAL}s, "
                f"got {self.min_poll_interval}"
            )


def normalize(remaining: int, granularity: int) -> int:
    """Floor to a granularity multiple; never over-report remaining quota."""
    return (remaining // granularity) * granularity


@dataclass(frozen=True)
class SettleResult:
    snapshot: QuotaSnapshot
    settled: bool


class QuotaAdapter:
    """One in-flight fetch per adapter; clock/sleep injectable for tests."""

    def __init__(self, spec: AdapterSpec, clock=time.monotonic, sleep=time.sleep):
        self.spec = spec
        self._clock = clock
        self._sleep = sleep
        self._last_fetch: float | None = None

    @property
    def source_id(self) -> str:
        return self.spec.parameters.get("source_id", self.spec.kind)

    def fetch(self) -> QuotaSnapshot:
        now = self._clock()
        if self._last_fetch is not None:
            elapsed = now - self._last_fetch
            if elapsed < self.spec.min_poll_interval:
                raise RateLimited(
                    f"polled {elapsed:.2f}s after previous fetch; "
                    f"minimum is {self.spec.min_poll_interval}s"
                )
        self._last_fetch = now
        remaining, granularity = self._read()
        if granularity <= 0:
            raise ParseFailure(f"granularity must be positive, got {granularity}")
        return QuotaSnapshot(
            remaining=normalize(remaining, granularity),
            granularity=granularity,
            taken_at=now,
            source=self.source_id,
            staleness_bound=self.spec.staleness_bound,
        )

    def wait_until_pollable(self) -> None:
        if self._last_fetch is None:
            return
        remaining = self.spec.min_poll_interval - (self._clock() - self._last_fetch)
        if remaining > 0:
            self._sleep(remaining)

    def _read(self) -> tuple[int, int]:
        kind = self.spec.kind
        if kind == SIMULATED_API:
            return self._read_api()
        if kind == SCRIPTED_COMMAND:
            return self._read_command()
        return self._read_file()

    def _read_api(self) -> tuple[int, int]:
        url = self.spec.parameters["url"]
        try:
            with urllib.request.urlopen(url, timeout=10) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (OSError, ValueError) as exc:
            raise SourceUnavailable(f"quota API {url}: {exc}") from exc
        try:
            return int(payload["remaining_bytes"]), int(payload["granularity_bytes"])
        except (KeyError, TypeError) as exc:
            raise ParseFailure(f"unexpected quota API payload: {payload!r}") from exc

    def _read_command(self) -> tuple[int, int]:
        command = self.spec.parameters["command"]
        try:
            proc = subprocess.run(
                command, shell=True, capture_output=True, text=True, timeout=30
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise SourceUnavailable(f"quota command failed: {exc}") from exc
        if proc.returncode != 0:
            raise SourceUnavailable(
                f"quota command exited {proc.returncode}: {proc.stderr.strip()}"
            )
        return self._parse_line(proc.stdout)

    def _read_file(self) -> tuple[int, int]:
        path = self.spec.parameters["path"]
        try:
            with open(path, encoding="utf-8") as handle:
                return self._parse_line(handle.read())
        except OSError as exc:
            raise SourceUnavailable(f"quota file {path}: {exc}") from exc

    @staticmethod
    def _parse_line(text: str) -> tuple[int, int]:
        match = _LINE_RE.search(text)
        if match is None:
            raise ParseFailure(f"no quota line in output: {text!r}")
        return int(match.group(1)), int(match.group(2))


def fetch_quota(adapter: QuotaAdapter) -> QuotaSnapshot:
    return adapter.fetch()


def await_settled_quota(
    adapter: QuotaAdapter,
    expected_min_delta: int,
    baseline: QuotaSnapshot,
    timeout: float,
) -> SettleResult:
    """Poll with exponential backoff until the billing delta becomes visible.

    Backoff doubles from min_poll_interval up to a 60 s cap.  The last
    snapshot is returned either way; ``settled`` is False on timeout and the
    caller maps that to ControlNotBilled handling.
    """
    if timeout < adapter.spec.staleness_bound:
        raise QuotaError(
            f"timeout {timeout}s below adapter staleness bound "
            f"{adapter.spec.staleness_bound}s"
        )
    deadline = adapter._clock() + timeout
    interval = adapter.spec.min_poll_interval
    snapshot = baseline
    while True:
        adapter.wait_until_pollable()
        snapshot = adapter.fetch()
        if baseline.remaining - snapshot.remaining >= expected_min_delta:
            return SettleResult(snapshot=snapshot, settled=True)
        now = adapter._clock()
        if now >= deadline:
            return SettleResult(snapshot=snapshot, settled=False)
        adapter._sleep(min(interval, max(0.0, deadline - now)))
        interval = min(interval * BACKOFF_FACTOR, BACKOFF_CAP)
