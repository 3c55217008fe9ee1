"""Traffic engine: verify / ip-probe / host-probe patterns with exact
byte accounting.

Each recipe issues sequential requests for the endpoint's resource until the
cumulative on-the-wire byte count (handshakes, headers and bodies, both
directions) reaches the target.  The presented hostname goes into the
protocol-appropriate location — Host header, TLS SNI, or the SNI inside the
QUIC Initial — and certificate validation is enabled only for the verify
experiment, where the presented name is the real one.  DNS is resolved at
most once per recipe; pinned hostnames resolve locally without a lookup.
"""

from __future__ import annotations

import logging
import ssl
import threading
import time
from dataclasses import dataclass, field

from . import ZrAuditError
from .endpoints import EndpointSpec, Experiment, IpVersion, Protocol
from .h3mini import H3CertificateRejected, H3Error, H3MiniClient
from .routes import ConnectFailed, DirectRoute, TlsStream  # noqa: F401 (ConnectFailed re-exported)

log = logging.getLogger(__name__)

DUMMY_HOSTNAME = "example.com"
USER_AGENT = "zraudit/0.1"
MAX_RESPONSE_HEAD = 16384
TLS_RETRY_CAP = 3


class EngineError(ZrAuditError):
    pass


class RecipeInvalid(EngineError):
    pass


class ProtocolUnsupported(EngineError):
    pass


@dataclass(frozen=True)
class TrafficRecipe:
    experiment: Experiment
    endpoint: EndpointSpec
    protocol: Protocol
    ip_version: IpVersion
    target_bytes: int
    presented_hostname: str
    destination_override: str | None = None

    def __post_init__(self):
        if self.target_bytes < 0:
            raise RecipeInvalid("target_bytes must be non-negative")
        if self.experiment is Experiment.VERIFY:
            if self.presented_hostname != self.endpoint.hostname:
                raise RecipeInvalid("verify must present the real hostname")
            if self.destination_override is not None:
                raise RecipeInvalid("verify must not override the destination")
        elif self.experiment is Experiment.IP_PROBE:
            if self.presented_hostname == self.endpoint.hostname:
                raise RecipeInvalid("ip-probe must present a dummy hostname")
            if self.destination_override is not None:
                raise RecipeInvalid("ip-probe goes to the real endpoint address")
        else:  # HOST_PROBE
            if self.presented_hostname != self.endpoint.hostname:
                raise RecipeInvalid("host-probe must present the real hostname")
            if self.destination_override is None:
                raise RecipeInvalid("host-probe needs a destination override")


@dataclass
class TrafficReport:
    bytes_sent: int = 0
    bytes_received: int = 0
    request_count: int = 0
    dns_lookups: int = 0
    protocol_used: str = ""
    started: float = 0.0
    finished: float = 0.0
    warnings: list[str] = field(default_factory=list)

    @property
    def bytes_total(self) -> int:
        return self.bytes_sent + self.bytes_received

    def to_dict(self) -> dict:
        return {
            "bytes_sent": self.bytes_sent,
            "bytes_received": self.bytes_received,
            "bytes_total": self.bytes_total,
            "request_count": self.request_count,
            "dns_lookups": self.dns_lookups,
            "protocol_used": self.protocol_used,
            "started": self.started,
            "finished": self.finished,
            "warnings": list(self.warnings),
        }


class PinHandle:
    """Keeps a hostname pinned to an address while alive."""

    def __init__(self, engine: "TrafficEngine", hostname: str, address: str):
        self._engine = engine
        self.hostname = hostname
        self.address = address
        self._released = False

    def release(self) -> None:
        if self._released:
            return
        self._released = True
        self._engine._unpin(self.hostname, self.address)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()


class TrafficEngine:
    """One engine per gateway route; recipes run sequentially."""

    def __init__(
        self,
        route=None,
        ca_path: str | None = None,
        dummy_hostname: str = DUMMY_HOSTNAME,
        timeout: float = 10.0,
    ):
        self.route = route if route is not None else DirectRoute()
        self.ca_path = ca_path
        self.dummy_hostname = dummy_hostname
        self.timeout = timeout
        self._pins: dict[str, str] = {}
        self._lock = threading.Lock()

    # --- hostname pinning --------------------------------------------------

    def pin_hostname(self, hostname: str, address: str) -> PinHandle:
        """Engine-scoped resolution override; last pin for a name wins."""
        with self._lock:
            self._pins[hostname] = address
        return PinHandle(self, hostname, address)

    def _unpin(self, hostname: str, address: str) -> None:
        with self._lock:
            if self._pins.get(hostname) == address:
                del self._pins[hostname]

    def _resolve(self, recipe: TrafficRecipe) -> tuple[str, int]:
        """(address, dns lookup count). At most one lookup per recipe."""
        if recipe.destination_override is not None:
            return recipe.destination_override, 0
        with self._lock:
            pinned = self._pins.get(recipe.endpoint.hostname)
        if pinned is not None:
            return pinned, 0
        addresses = recipe.endpoint.addresses(recipe.ip_version)
        if not addresses:
            raise RecipeInvalid(
                f"{recipe.endpoint.hostname} has no {recipe.ip_version.value} address"
            )
        return addresses[0], 1

    # --- recipes -------------------------------------------------------------

    def run_recipe(self, recipe: TrafficRecipe) -> TrafficReport:
        if recipe.protocol not in recipe.endpoint.protocols:
            raise ProtocolUnsupported(
                f"{recipe.endpoint.hostname} does not offer {recipe.protocol.value}"
            )
        address, lookups = self._resolve(recipe)
        report = TrafficReport(
            dns_lookups=lookups,
            protocol_used=recipe.protocol.value,
            started=time.time(),
        )
        if recipe.target_bytes > 0:
            port = recipe.endpoint.port(recipe.protocol)
            verify = recipe.experiment is Experiment.VERIFY
            if recipe.protocol is Protocol.HTTP3:
                self._run_h3(recipe, address, port, verify, report)
            else:
                self._run_tcp(recipe, address, port, verify, report)
        report.finished = time.time()
        return report

    def generate_control_traffic(
        self,
        control_size: int,
        endpoint: EndpointSpec,
        protocol: Protocol = Protocol.HTTP,
        ip_version: IpVersion = IpVersion.V4,
    ) -> TrafficReport:
        """Transfer >= control_size bytes to the non-zero-rated control host."""
        recipe = TrafficRecipe(
            experiment=Experiment.VERIFY,
            endpoint=endpoint,
            protocol=protocol,
            ip_version=ip_version,
            target_bytes=control_size,
            presented_hostname=endpoint.hostname,
        )
        return self.run_recipe(recipe)

    def probe_endpoint_support(
        self, endpoint: EndpointSpec
    ) -> dict[tuple[Protocol, IpVersion], bool]:
        """Try a minimal fetch for every (protocol, ip version) pair."""
        matrix: dict[tuple[Protocol, IpVersion], bool] = {}
        for protocol in Protocol:
            for version in IpVersion:
                matrix[(protocol, version)] = self._pair_supported(
                    endpoint, protocol, version
                )
        return matrix

    def _pair_supported(
        self, endpoint: EndpointSpec, protocol: Protocol, version: IpVersion
    ) -> bool:
        if not endpoint.addresses(version):
            return False
        probe_endpoint = EndpointSpec(
            application=endpoint.application,
            hostname=endpoint.hostname,
            resource_path=endpoint.resource_path,
            addresses_v4=endpoint.addresses_v4,
            addresses_v6=endpoint.addresses_v6,
            protocols=frozenset(Protocol),
            ports=endpoint.ports,
        )
        recipe = TrafficRecipe(
            experiment=Experiment.IP_PROBE,
            endpoint=probe_endpoint,
            protocol=protocol,
            ip_version=version,
            target_bytes=1,
            presented_hostname=endpoint.hostname + ".probe.invalid",
        )
        try:
            self.run_recipe(recipe)
            return True
        except (ZrAuditError, OSError):
            return False

    # --- HTTP / HTTPS ----------------------------------------------------------

    def _tls_context(self, verify: bool) -> ssl.SSLContext:
        context = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
        if verify:
            if self.ca_path:
                context.load_verify_locations(self.ca_path)
            else:
                context.load_default_certs()
        else:
            context.check_hostname = False
            context.verify_mode = ssl.CERT_NONE
        return context

    def _open_http_stream(self, recipe, address, port, verify, report: TrafficReport):
        raw = self.route.open_stream(address, port, timeout=self.timeout)
        raw.settimeout(self.timeout)
        if recipe.protocol is Protocol.HTTP:
            return raw
        stream = TlsStream(raw, self._tls_context(verify), recipe.presented_hostname)
        try:
            stream.handshake()
        except ssl.SSLError as exc:
            # failed-handshake bytes still crossed the classifier: count them
            report.bytes_sent += stream.bytes_sent
            report.bytes_received += stream.bytes_received
            stream.close()
            raise ProtocolUnsupported(
                f"TLS handshake with {address}:{port} failed: {exc}"
            ) from exc
        return stream

    def _run_tcp(self, recipe, address, port, verify, report: TrafficReport) -> None:
        sent = received = 0  # totals of already-closed connections
        stream = None
        tls_failures = 0
        request = (
            f"GET {recipe.endpoint.resource_path} HTTP/1.1\r\n"
            f"Host: {recipe.presented_hostname}\r\n"
            f"User-Agent: {USER_AGENT}\r\n"
            f"Accept: */*\r\n"
            f"Connection: keep-alive\r\n\r\n"
        ).encode("latin-1")

        def running_total() -> int:
            live = stream.bytes_sent + stream.bytes_received if stream else 0
            return sent + received + live

        try:
            while running_total() < recipe.target_bytes:
                if stream is None:
                    try:
                        stream = self._open_http_stream(
                            recipe, address, port, verify, report
                        )
                    except ProtocolUnsupported:
                        tls_failures += 1
                        if tls_failures >= TLS_RETRY_CAP:
                            raise
                        continue
                try:
                    stream.sendall(request)
                    report.request_count += 1
                    status, complete = self._read_response(stream)
                except (OSError, ssl.SSLError):
                    complete = False
                    status = None
                if status is not None and not 200 <= status < 300:
                    warning = f"non-2xx response {status} for {recipe.endpoint.resource_path}"
                    if warning not in report.warnings:
                        report.warnings.append(warning)
                if not complete:
                    sent += stream.bytes_sent
                    received += stream.bytes_received
                    stream.close()
                    stream = None
        finally:
            if stream is not None:
                sent += stream.bytes_sent
                received += stream.bytes_received
                stream.close()
            report.bytes_sent += sent
            report.bytes_received += received

    def _read_response(self, stream) -> tuple[int | None, bool]:
        """Returns (status, connection still usable)."""
        head = b""
        while b"\r\n\r\n" not in head:
            if len(head) > MAX_RESPONSE_HEAD:
                return None, False
            chunk = stream.recv()
            if not chunk:
                return None, False
            head += chunk
        head_part, rest = head.split(b"\r\n\r\n", 1)
        lines = head_part.split(b"\r\n")
        try:
            status = int(lines[0].split(b" ")[1])
        except (IndexError, ValueError):
            return None, False
        length = 0
        keep_alive = True
        for line in lines[1:]:
            name, _, value = line.partition(b":")
            if name.lower() == b"content-length":
                try:
                    length = int(value.strip())
                except ValueError:
                    return status, False
            elif name.lower() == b"connection" and value.strip().lower() == b"close":
                keep_alive = False
        remaining = length - len(rest)
        while remaining > 0:
            chunk = stream.recv(min(remaining, 65536))
            if not chunk:
                return status, False
            remaining -= len(chunk)
        return status, keep_alive

    # --- HTTP3 -----------------------------------------------------------------

    def _run_h3(self, recipe, address, port, verify, report: TrafficReport) -> None:
        channel = self.route.open_datagram(address, port, timeout=self.timeout)
        client = H3MiniClient(
            channel,
            server_name=recipe.presented_hostname,
            verify_ca=self.ca_path if verify else None,
        )
        try:
            try:
                client.connect()
            except H3CertificateRejected:
                raise
            except H3Error as exc:
                raise ProtocolUnsupported(str(exc)) from exc
            report.protocol_used = client.negotiated_alpn or recipe.protocol.value
            while channel.bytes_sent + channel.bytes_received < recipe.target_bytes:
                try:
                    status, _ = client.request(
                        recipe.presented_hostname, recipe.endpoint.resource_path
                    )
                except H3Error as exc:
                    raise ProtocolUnsupported(str(exc)) from exc
                report.request_count += 1
                if not 200 <= status < 300:
                    warning = f"non-2xx response {status} for {recipe.endpoint.resource_path}"
                    if warning not in report.warnings:
                        report.warnings.append(warning)
        finally:
            report.bytes_sent += channel.bytes_sent
            report.bytes_received += channel.bytes_received
            channel.close()
