"""Origin server and metering gateway: relay fidelity, metering, classification."""

import socket
import ssl
import time

import pytest

from zraudit.endpoints import EndpointSpec, Experiment, IpVersion, Protocol
from zraudit.engine import TrafficEngine, TrafficRecipe
from zraudit.certs import CertStore
from zraudit.routes import (
    GATEWAY_UDP_ACK,
    GatewayRoute,
    encode_gateway_header,
)
from zraudit.sim.gateway import GatewayServer, NetworkMap, flow_class_for
from zraudit.sim.metering import Meter
from zraudit.sim.origin import OriginServer, ResourceSet, pattern_bytes
from zraudit.sim.rules import (
    ClassificationRule,
    OperatorProfile,
    SessionKind,
)

HOSTNAME = "origin.example"
SIM_V4 = "203.0.113.50"
SIM_V6 = "2001:db8::50"
BODY = pattern_bytes(1000)


@pytest.fixture(scope="module")
def certs(tmp_path_factory):
    return CertStore([HOSTNAME], directory=str(tmp_path_factory.mktemp("certs")))


@pytest.fixture(scope="module")
def origin(certs):
    server = OriginServer(ResourceSet({"/r": BODY}), cert_store=certs)
    server.start()
    yield server
    server.stop()


def make_profile(rules=()):
    return OperatorProfile(name="op", rules=list(rules), quota_bytes=10**9)


@pytest.fixture()
def gateway(origin):
    network_map = NetworkMap()
    for sim_ip in (SIM_V4, SIM_V6):
        network_map.add(sim_ip, 80, "tcp", "127.0.0.1", origin.http_port)
        network_map.add(sim_ip, 443, "tcp", "127.0.0.1", origin.https_port)
        network_map.add(sim_ip, 443, "udp", "127.0.0.1", origin.h3_port)
    server = GatewayServer(Meter(make_profile()), network_map)
    server.start()
    yield server
    server.stop()


def endpoint(protocols=None):
    return EndpointSpec(
        application="App",
        hostname=HOSTNAME,
        resource_path="/r",
        addresses_v4=(SIM_V4,),
        addresses_v6=(SIM_V6,),
        protocols=frozenset(protocols or Protocol),
    )


def recipe(protocol, target=1000, version=IpVersion.V4, endpoint_spec=None):
    return TrafficRecipe(
        experiment=Experiment.VERIFY,
        endpoint=endpoint_spec or endpoint(),
        protocol=protocol,
        ip_version=version,
        target_bytes=target,
        presented_hostname=HOSTNAME,
    )


def engine_for(gateway, certs):
    return TrafficEngine(
        route=GatewayRoute("127.0.0.1", gateway.tcp_port, gateway.udp_port),
        ca_path=certs.ca_path,
    )


# The origin may emit a TLS close-notify alert after the engine has already
# closed its side; the gateway relays and meters it but the client never
# reads it, so metered bytes may exceed the engine's count by one alert.
TLS_CLOSE_SLACK = 64


def assert_metered(meter_value, engine_total):
    assert engine_total <= meter_value <= engine_total + TLS_CLOSE_SLACK


class TestOriginDirect:
    def test_http_get(self, origin):
        with socket.create_connection(("127.0.0.1", origin.http_port)) as sock:
            sock.sendall(b"GET /r HTTP/1.1\r\nHost: %s\r\n\r\n" % HOSTNAME.encode())
            data = b""
            while b"\r\n\r\n" not in data or len(data.split(b"\r\n\r\n", 1)[1]) < 1000:
                chunk = sock.recv(65536)
                if not chunk:
                    break
                data += chunk
        head, body = data.split(b"\r\n\r\n", 1)
        assert head.startswith(b"HTTP/1.1 200")
        assert body == BODY

    def test_http_404(self, origin):
        with socket.create_connection(("127.0.0.1", origin.http_port)) as sock:
            sock.sendall(b"GET /missing HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
            data = b""
            while True:
                chunk = sock.recv(65536)
                if not chunk:
                    break
                data += chunk
        assert data.startswith(b"HTTP/1.1 404")

    def test_https_cert_validates_against_store_ca(self, origin, certs):
        context = ssl.create_default_context(cafile=certs.ca_path)
        with socket.create_connection(("127.0.0.1", origin.https_port)) as raw:
            with context.wrap_socket(raw, server_hostname=HOSTNAME) as tls:
                tls.sendall(b"GET /r HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
                data = b""
                while True:
                    chunk = tls.recv(65536)
                    if not chunk:
                        break
                    data += chunk
        assert data.split(b"\r\n\r\n", 1)[1] == BODY

    def test_dynamic_bytes_resource(self, origin):
        resources = origin.resources
        assert resources.get("/bytes/5") == b"01234"
        assert resources.get("/bytes/99999999") is None
        assert resources.get("/nope") is None


class TestFlowClassFor:
    @pytest.mark.parametrize("transport,ip,port,expected", [
        ("tcp", SIM_V4, 80, (Protocol.HTTP, IpVersion.V4)),
        ("tcp", SIM_V4, 443, (Protocol.HTTPS, IpVersion.V4)),
        ("udp", SIM_V6, 443, (Protocol.HTTP3, IpVersion.V6)),
        ("udp", SIM_V4, 80, None),
        ("tcp", SIM_V4, 8080, None),
    ])
    def test_mapping(self, transport, ip, port, expected):
        got = flow_class_for(transport, ip, port)
        if expected is None:
            assert got is None
        else:
            assert (got.protocol, got.ip_version) == expected


class TestGatewayRelay:
    @pytest.mark.parametrize("protocol", list(Protocol))
    def test_relay_and_exact_metering(self, gateway, certs, protocol):
        engine = engine_for(gateway, certs)
        report = engine.run_recipe(recipe(protocol, target=2500))
        assert report.bytes_total >= 2500
        # the gateway meters what the engine counted: the preamble and the
        # UDP ack are excluded on both sides
        assert_metered(gateway.meter.metered_total, report.bytes_total)
        assert gateway.meter.conservation_holds()

    def test_ipv6_destination_classifies_as_v6(self, gateway, certs):
        engine = engine_for(gateway, certs)
        engine.run_recipe(recipe(Protocol.HTTPS, version=IpVersion.V6))
        flows = gateway.meter.flows()
        assert len(flows) == 1
        assert str(flows[0].flow_class) == "https/v6"
        assert flows[0].extracted_hostname == HOSTNAME

    def test_hostname_extracted_per_protocol(self, gateway, certs):
        engine = engine_for(gateway, certs)
        for protocol in Protocol:
            engine.run_recipe(recipe(protocol, target=100))
        names = {str(f.flow_class): f.extracted_hostname
                 for f in gateway.meter.flows()}
        assert names == {
            "http/v4": HOSTNAME,
            "https/v4": HOSTNAME,
            "http3/v4": HOSTNAME,
        }

    def test_zero_rating_rule_fills_pool_not_quota(self, origin, certs):
        network_map = NetworkMap()
        network_map.add(SIM_V4, 443, "tcp", "127.0.0.1", origin.https_port)
        profile = make_profile([
            ClassificationRule("r1", "hostname", HOSTNAME, pool="zr")])
        gw = GatewayServer(Meter(profile), network_map)
        gw.start()
        try:
            engine = engine_for(gw, certs)
            before = gw.meter.remaining()
            report = engine.run_recipe(recipe(Protocol.HTTPS))
            assert gw.meter.remaining() == before
            assert_metered(gw.meter.pool_bytes("zr"), report.bytes_total)
        finally:
            gw.stop()

    def test_roaming_session_bills_everything(self, origin, certs):
        network_map = NetworkMap()
        network_map.add(SIM_V4, 443, "tcp", "127.0.0.1", origin.https_port)
        profile = make_profile([
            ClassificationRule("r1", "hostname", HOSTNAME, pool="zr")])
        gw = GatewayServer(Meter(profile), network_map)
        gw.session_kind = SessionKind.ROAMING
        gw.start()
        try:
            engine = engine_for(gw, certs)
            report = engine.run_recipe(recipe(Protocol.HTTPS))
            assert gw.meter.pool_bytes() == 0
            assert_metered(gw.meter.billed_total, report.bytes_total)
        finally:
            gw.stop()

    def test_unknown_destination_closes_connection(self, gateway):
        with socket.create_connection(("127.0.0.1", gateway.tcp_port)) as sock:
            sock.sendall(encode_gateway_header("tcp", "192.0.2.99", 80))
            sock.settimeout(5.0)
            assert sock.recv(1) == b""
        assert gateway.meter.metered_total == 0


class TestGatewayUdp:
    def associate(self, gateway, dest_ip=SIM_V4, port=443):
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.settimeout(5.0)
        sock.connect(("127.0.0.1", gateway.udp_port))
        sock.send(encode_gateway_header("udp", dest_ip, port))
        return sock

    def test_association_ack(self, gateway):
        sock = self.associate(gateway)
        try:
            assert sock.recv(64) == GATEWAY_UDP_ACK
        finally:
            sock.close()
        assert gateway.meter.metered_total == 0  # preamble and ack are free

    def test_unknown_mapping_gets_no_ack(self, gateway):
        sock = self.associate(gateway, dest_ip="192.0.2.99")
        sock.settimeout(0.5)
        try:
            with pytest.raises(socket.timeout):
                sock.recv(64)
        finally:
            sock.close()

    def test_header_with_trailing_bytes_ignored(self, gateway):
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.settimeout(0.5)
        sock.connect(("127.0.0.1", gateway.udp_port))
        sock.send(encode_gateway_header("udp", SIM_V4, 443) + b"extra")
        try:
            with pytest.raises(socket.timeout):
                sock.recv(64)
        finally:
            sock.close()

    def test_post_ack_datagrams_metered_both_ways(self, origin, gateway):
        # point the association at a plain UDP echo we control
        echo = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        echo.bind(("127.0.0.1", 0))
        echo.settimeout(5.0)
        gateway.network_map.add("203.0.113.99", 443, "udp",
                                "127.0.0.1", echo.getsockname()[1])
        sock = self.associate(gateway, dest_ip="203.0.113.99")
        try:
            assert sock.recv(64) == GATEWAY_UDP_ACK
            sock.send(b"ping-1234")
            datagram, peer = echo.recvfrom(65535)
            assert datagram == b"ping-1234"
            echo.sendto(b"pong-12345", peer)
            assert sock.recv(64) == b"pong-12345"
            deadline = time.time() + 5.0
            while gateway.meter.metered_total < 19 and time.time() < deadline:
                time.sleep(0.02)
            assert gateway.meter.metered_total == len(b"ping-1234") + len(b"pong-12345")
        finally:
            sock.close()
            echo.close()
