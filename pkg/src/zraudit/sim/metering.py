"""Quota metering with billing lag, zero-rating pools and overdraft.

Billable bytes become visible to the quota API only after the configured
billing lag; reported values are floored to the profile's granularity so
remaining quota is never over-reported.  Traffic is never blocked: billable
bytes beyond the quota accrue in an overdraft counter.
"""

from __future__ import annotations

import itertools
import threading
import time
from dataclasses import dataclass, field

from .rules import FlowClass, OperatorProfile, SessionKind


@dataclass
class FlowRecord:
    flow_id: int
    transport: str
    src: str
    dst_ip: str
    dst_port: int
    flow_class: FlowClass | None
    session_kind: SessionKind
    extracted_hostname: str | None = None
    matched_rule: str | None = None
    pool: str | None = None
    billed: bool = True
    classified: bool = False
    bytes_metered: int = 0
    opened_at: float = 0.0
    closed_at: float | None = None

    def to_dict(self) -> dict:
        return {
            "flow_id": self.flow_id,
            "transport": self.transport,
            "src": self.src,
            "dst_ip": self.dst_ip,
            "dst_port": self.dst_port,
            "flow_class": str(self.flow_class) if self.flow_class else None,
            "session_kind": self.session_kind.value,
            "extracted_hostname": self.extracted_hostname,
            "matched_rule": self.matched_rule,
            "pool": self.pool,
            "billed": self.billed,
            "bytes_metered": self.bytes_metered,
        }


@dataclass
class _BillingEvent:
    visible_at: float
    amount: int


class Meter:
    """Thread-safe per-subscriber meter; one per operator profile."""

    def __init__(self, profile: OperatorProfile, clock=time.monotonic):
        self.profile = profile
        self._clock = clock
        self._lock = threading.Lock()
        self._flow_ids = itertools.count(1)
        self._flows: dict[int, FlowRecord] = {}
        self._events: list[_BillingEvent] = []
        self._pools: dict[str, int] = {}
        self._billed_total = 0
        self._pending_total = 0
        self._metered_total = 0

    def open_flow(
        self, transport: str, src: str, dst_ip: str, dst_port: int, session_kind: SessionKind
    ) -> FlowRecord:
        with self._lock:
            record = FlowRecord(
                flow_id=next(self._flow_ids),
                transport=transport,
                src=src,
                dst_ip=dst_ip,
                dst_port=dst_port,
                flow_class=None,
                session_kind=session_kind,
                opened_at=self._clock(),
            )
            self._flows[record.flow_id] = record
            return record

    def add_bytes(self, record: FlowRecord, amount: int) -> None:
        if amount <= 0:
            return
        with self._lock:
            record.bytes_metered += amount
            self._metered_total += amount
            if record.classified:
                self._attribute(record, amount)
            else:
                self._pending_total += amount

    def set_classification(
        self,
        record: FlowRecord,
        flow_class: FlowClass | None,
        hostname: str | None,
        pool: str | None,
        matched_rule: str | None,
    ) -> None:
        """Fix the flow's billing decision and attribute buffered bytes."""
        with self._lock:
            if record.classified:
                return
            record.flow_class = flow_class
            record.extracted_hostname = hostname
            record.pool = pool
            record.matched_rule = matched_rule
            record.billed = pool is None
            record.classified = True
            pending = record.bytes_metered
            self._pending_total -= pending
            self._attribute(record, pending)

    def close_flow(self, record: FlowRecord) -> None:
        with self._lock:
            record.closed_at = self._clock()
            if not record.classified:
                # never classified (no parsable first bytes): billable
                record.classified = True
                record.billed = True
                pending = record.bytes_metered
                self._pending_total -= pending
                self._attribute(record, pending)

    def _attribute(self, record: FlowRecord, amount: int) -> None:
        if amount <= 0:
            return
        if record.billed:
            self._billed_total += amount
            self._events.append(
                _BillingEvent(visible_at=self._clock() + self.profile.billing_lag, amount=amount)
            )
        else:
            pool = record.pool or "default"
            self._pools[pool] = self._pools.get(pool, 0) + amount

    def visible_billed(self, now: float | None = None) -> int:
        now = self._clock() if now is None else now
        with self._lock:
            return sum(e.amount for e in self._events if e.visible_at <= now)

    def remaining(self, now: float | None = None) -> int:
        """Reported remaining quota: floored to granularity, never negative."""
        visible = self.visible_billed(now)
        raw = max(0, self.profile.quota_bytes - visible)
        g = self.profile.granularity
        return (raw // g) * g

    @property
    def overdraft(self) -> int:
        with self._lock:
            return max(0, self._billed_total - self.profile.quota_bytes)

    @property
    def billed_total(self) -> int:
        with self._lock:
            return self._billed_total

    @property
    def metered_total(self) -> int:
        with self._lock:
            return self._metered_total

    def pool_bytes(self, pool: str | None = None) -> int:
        with self._lock:
            if pool is not None:
                return self._pools.get(pool, 0)
            return sum(self._pools.values())

    def conservation_holds(self) -> bool:
        """metered == billed + pooled + still-pending, exactly."""
        with self._lock:
            return self._metered_total == (
                self._billed_total + sum(self._pools.values()) + self._pending_total
            )

    def flows(self) -> list[FlowRecord]:
        with self._lock:
            return list(self._flows.values())
