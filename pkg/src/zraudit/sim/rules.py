"""Zero-rating classification rules and operator profiles.

A flow is zero-rated when at least one rule matches its destination address
(IP-prefix rule) or its extracted hostname (hostname rule), the flow's
protocol/IP-version class is within the rule's applicability set, and the
current session permits zero-rating at all.
"""

from __future__ import annotations

import enum
import ipaddress
import json
from dataclasses import dataclass, field
from pathlib import Path

from .. import ZrAuditError
from ..endpoints import IpVersion, Protocol

IP_PREFIX = "ip-prefix"
HOSTNAME = "hostname"


class RuleError(ZrAuditError):
    pass


class SessionKind(str, enum.Enum):
    DOMESTIC = "domestic"
    ROAMING = "roaming"


class RoamingMode(str, enum.Enum):
    NOT_OFFERED = "not-offered"
    HOME_ROUTED_ZERO_RATING_ON = "home-routed-zero-rating-on"
    HOME_ROUTED_ZERO_RATING_OFF = "home-routed-zero-rating-off"


@dataclass(frozen=True, order=True)
class FlowClass:
    protocol: Protocol
    ip_version: IpVersion

    def __str__(self) -> str:
        return f"{self.protocol.value}/{self.ip_version.value}"

    @classmethod
    def parse(cls, text: str) -> "FlowClass":
        proto, _, ver = text.partition("/")
        return cls(Protocol(proto), IpVersion(ver))


ALL_CLASSES = frozenset(
    FlowClass(p, v) for p in Protocol for v in IpVersion
)


def classes_v4_only() -> frozenset[FlowClass]:
    return frozenset(c for c in ALL_CLASSES if c.ip_version is IpVersion.V4)


def classes_https_only() -> frozenset[FlowClass]:
    return frozenset(c for c in ALL_CLASSES if c.protocol is Protocol.HTTPS)


def classes_tcp_only() -> frozenset[FlowClass]:
    return frozenset(c for c in ALL_CLASSES if c.protocol is not Protocol.HTTP3)


@dataclass(frozen=True)
class ClassificationRule:
    rule_id: str
    match_kind: str  # ip-prefix | hostname
    pattern: str  # CIDR, exact name, or ".suffix" / "*.suffix"
    applies_to: frozenset[FlowClass] = ALL_CLASSES
    pool: str = "default"

    def __post_init__(self):
        if self.match_kind not in (IP_PREFIX, HOSTNAME):
            raise RuleError(f"unknown match kind {self.match_kind!r}")
        if not self.applies_to:
            raise RuleError(f"rule {self.rule_id}: applies_to must be non-empty")
        if self.match_kind == IP_PREFIX:
            try:
                ipaddress.ip_network(self.pattern, strict=False)
            except ValueError as exc:
                raise RuleError(f"rule {self.rule_id}: bad prefix {self.pattern!r}") from exc

    def matches(self, dest_ip: str, hostname: str | None, flow_class: FlowClass) -> bool:
        if flow_class not in self.applies_to:
            return False
        if self.match_kind == IP_PREFIX:
            network = ipaddress.ip_network(self.pattern, strict=False)
            try:
                address = ipaddress.ip_address(dest_ip)
            except ValueError:
                return False
            return address.version == network.version and address in network
        if hostname is None:
            return False
        return hostname_matches(self.pattern, hostname)

    def to_dict(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "match_kind": self.match_kind,
            "pattern": self.pattern,
            "applies_to": sorted(str(c) for c in self.applies_to),
            "pool": self.pool,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassificationRule":
        applies = d.get("applies_to")
        return cls(
            rule_id=d["rule_id"],
            match_kind=d["match_kind"],
            pattern=d["pattern"],
            applies_to=frozenset(FlowClass.parse(c) for c in applies)
            if applies
            else ALL_CLASSES,
            pool=d.get("pool", "default"),
        )


def hostname_matches(pattern: str, hostname: str) -> bool:
    """Exact match, or suffix match for patterns like '.fbcdn.net'."""
    hostname = hostname.lower().rstrip(".")
    pattern = pattern.lower().rstrip(".")
    if pattern.startswith("*."):
        pattern = pattern[1:]
    if pattern.startswith("."):
        return hostname.endswith(pattern) or hostname == pattern[1:]
    return hostname == pattern


@dataclass
class OperatorProfile:
    name: str
    rules: list[ClassificationRule] = field(default_factory=list)
    quota_bytes: int = 4 * 1024**3
    granularity: int = 1
    billing_lag: float = 0.0
    roaming: RoamingMode = RoamingMode.NOT_OFFERED
    subscriber_id: str = "sim"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "rules": [r.to_dict() for r in self.rules],
            "quota_bytes": self.quota_bytes,
            "granularity": self.granularity,
            "billing_lag": self.billing_lag,
            "roaming": self.roaming.value,
            "subscriber_id": self.subscriber_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OperatorProfile":
        return cls(
            name=d["name"],
            rules=[ClassificationRule.from_dict(r) for r in d.get("rules", [])],
            quota_bytes=int(d.get("quota_bytes", 4 * 1024**3)),
            granularity=int(d.get("granularity", 1)),
            billing_lag=float(d.get("billing_lag", 0.0)),
            roaming=RoamingMode(d.get("roaming", "not-offered")),
            subscriber_id=d.get("subscriber_id", "sim"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "OperatorProfile":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def classify_flow(
    profile: OperatorProfile,
    session_kind: SessionKind,
    dest_ip: str,
    flow_class: FlowClass,
    hostname: str | None,
) -> str | None:
    """Returns the matched pool id, or None when the flow is billable."""
    if session_kind is SessionKind.ROAMING:
        if profile.roaming is not RoamingMode.HOME_ROUTED_ZERO_RATING_ON:
            return None
    for rule in profile.rules:
        if rule.matches(dest_ip, hostname, flow_class):
            return rule.pool
    return None


def matching_rule(
    profile: OperatorProfile,
    session_kind: SessionKind,
    dest_ip: str,
    flow_class: FlowClass,
    hostname: str | None,
) -> ClassificationRule | None:
    if session_kind is SessionKind.ROAMING:
        if profile.roaming is not RoamingMode.HOME_ROUTED_ZERO_RATING_ON:
            return None
    for rule in profile.rules:
        if rule.matches(dest_ip, hostname, flow_class):
            return rule
    return None
