"""Shared protocol/experiment vocabulary and web-endpoint descriptions."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from . import ZrAuditError


class Protocol(str, enum.Enum):
    HTTP = "http"
    HTTPS = "https"
    HTTP3 = "http3"

    @property
    def default_port(self) -> int:
        return 80 if self is Protocol.HTTP else 443

    @property
    def transport(self) -> str:
        return "udp" if self is Protocol.HTTP3 else "tcp"


class IpVersion(str, enum.Enum):
    V4 = "v4"
    V6 = "v6"


class Experiment(str, enum.Enum):
    VERIFY = "verify"
    IP_PROBE = "ip-probe"
    HOST_PROBE = "host-probe"


PROTOCOL_ORDER = (Protocol.HTTP, Protocol.HTTPS, Protocol.HTTP3)
VERSION_ORDER = (IpVersion.V4, IpVersion.V6)
EXPERIMENT_ORDER = (Experiment.VERIFY, Experiment.IP_PROBE, Experiment.HOST_PROBE)


class EndpointError(ZrAuditError):
    pass


@dataclass(frozen=True)
class EndpointSpec:
    """An application web endpoint serving a fetchable static resource."""

    application: str
    hostname: str
    resource_path: str
    addresses_v4: tuple[str, ...] = ()
    addresses_v6: tuple[str, ...] = ()
    protocols: frozenset[Protocol] = frozenset(
        {Protocol.HTTP, Protocol.HTTPS, Protocol.HTTP3}
    )
    # port per protocol; canonical ports by default, overridable for
    # direct (gateway-less) desk tests against ephemeral origin ports
    ports: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        if not self.addresses_v4 and not self.addresses_v6:
            raise EndpointError(f"endpoint {self.hostname}: no addresses")
        if not self.protocols:
            raise EndpointError(f"endpoint {self.hostname}: no protocols")

    def addresses(self, ip_version: IpVersion) -> tuple[str, ...]:
        return self.addresses_v4 if ip_version is IpVersion.V4 else self.addresses_v6

    def port(self, protocol: Protocol) -> int:
        return int(self.ports.get(protocol.value, protocol.default_port))

    def to_dict(self) -> dict:
        d = {
            "application": self.application,
            "hostname": self.hostname,
            "resource_path": self.resource_path,
            "addresses_v4": list(self.addresses_v4),
            "addresses_v6": list(self.addresses_v6),
            "protocols": sorted(p.value for p in self.protocols),
        }
        if self.ports:
            d["ports"] = dict(self.ports)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EndpointSpec":
        return cls(
            application=d["application"],
            hostname=d["hostname"],
            resource_path=d["resource_path"],
            addresses_v4=tuple(d.get("addresses_v4", ())),
            addresses_v6=tuple(d.get("addresses_v6", ())),
            protocols=frozenset(Protocol(p) for p in d.get("protocols", []))
            or frozenset({Protocol.HTTP, Protocol.HTTPS, Protocol.HTTP3}),
            ports=dict(d.get("ports", {})),
        )
