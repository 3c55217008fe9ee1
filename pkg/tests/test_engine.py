"""Traffic engine: recipe invariants, resolution/pinning, byte counting."""

import pytest

from zraudit.certs import CertStore
from zraudit.endpoints import EndpointSpec, Experiment, IpVersion, Protocol
from zraudit.engine import (
    ProtocolUnsupported,
    RecipeInvalid,
    TrafficEngine,
    TrafficRecipe,
)
from zraudit.h3mini import H3CertificateRejected
from zraudit.sim.origin import OriginServer, ResourceSet, pattern_bytes

HOSTNAME = "engine-origin.example"
BODY = pattern_bytes(2048)


@pytest.fixture(scope="module")
def certs(tmp_path_factory):
    return CertStore([HOSTNAME], directory=str(tmp_path_factory.mktemp("certs")))


@pytest.fixture(scope="module")
def wrong_certs(tmp_path_factory):
    # a different CA that did not sign the origin's leaf
    return CertStore([HOSTNAME], directory=str(tmp_path_factory.mktemp("other")))


@pytest.fixture(scope="module")
def origin(certs):
    server = OriginServer(ResourceSet({"/r": BODY}), cert_store=certs)
    server.start()
    yield server
    server.stop()


def endpoint(origin, protocols=None, v6=()):
    return EndpointSpec(
        application="App",
        hostname=HOSTNAME,
        resource_path="/r",
        addresses_v4=("127.0.0.1",),
        addresses_v6=tuple(v6),
        protocols=frozenset(protocols or Protocol),
        ports={
            "http": origin.http_port,
            "https": origin.https_port,
            "http3": origin.h3_port,
        },
    )


def verify_recipe(origin, protocol, target=1000, **kwargs):
    return TrafficRecipe(
        experiment=Experiment.VERIFY,
        endpoint=endpoint(origin, **kwargs),
        protocol=protocol,
        ip_version=IpVersion.V4,
        target_bytes=target,
        presented_hostname=HOSTNAME,
    )


class TestRecipeInvariants:
    def kwargs(self, origin):
        return dict(endpoint=endpoint(origin), protocol=Protocol.HTTPS,
                    ip_version=IpVersion.V4, target_bytes=100)

    def test_verify_must_not_override(self, origin):
        with pytest.raises(RecipeInvalid):
            TrafficRecipe(experiment=Experiment.VERIFY,
                          presented_hostname=HOSTNAME,
                          destination_override="127.0.0.1",
                          **self.kwargs(origin))
        with pytest.raises(RecipeInvalid):
            TrafficRecipe(experiment=Experiment.VERIFY,
                          presented_hostname="example.com",
                          **self.kwargs(origin))

    def test_ip_probe_needs_dummy_name_and_no_override(self, origin):
        with pytest.raises(RecipeInvalid):
            TrafficRecipe(experiment=Experiment.IP_PROBE,
                          presented_hostname=HOSTNAME, **self.kwargs(origin))
        with pytest.raises(RecipeInvalid):
            TrafficRecipe(experiment=Experiment.IP_PROBE,
                          presented_hostname="example.com",
                          destination_override="127.0.0.1",
                          **self.kwargs(origin))

    def test_host_probe_needs_override_and_real_name(self, origin):
        with pytest.raises(RecipeInvalid):
            TrafficRecipe(experiment=Experiment.HOST_PROBE,
                          presented_hostname=HOSTNAME, **self.kwargs(origin))
        with pytest.raises(RecipeInvalid):
            TrafficRecipe(experiment=Experiment.HOST_PROBE,
                          presented_hostname="example.com",
                          destination_override="127.0.0.1",
                          **self.kwargs(origin))

    def test_negative_target_rejected(self, origin):
        with pytest.raises(RecipeInvalid):
            TrafficRecipe(experiment=Experiment.VERIFY,
                          presented_hostname=HOSTNAME, target_bytes=-1,
                          endpoint=endpoint(origin), protocol=Protocol.HTTP,
                          ip_version=IpVersion.V4)


class TestResolution:
    def test_zero_target_gives_empty_report_with_one_lookup(self, origin, certs):
        engine = TrafficEngine(ca_path=certs.ca_path)
        report = engine.run_recipe(verify_recipe(origin, Protocol.HTTP, target=0))
        assert report.bytes_total == 0
        assert report.request_count == 0
        assert report.dns_lookups == 1
        assert report.protocol_used == "http"

    def test_pin_avoids_lookup_and_reverts_on_release(self, origin, certs):
        engine = TrafficEngine(ca_path=certs.ca_path)
        with engine.pin_hostname(HOSTNAME, "127.0.0.1"):
            report = engine.run_recipe(verify_recipe(origin, Protocol.HTTP, 0))
            assert report.dns_lookups == 0
        report = engine.run_recipe(verify_recipe(origin, Protocol.HTTP, 0))
        assert report.dns_lookups == 1

    def test_last_pin_wins(self, origin, certs):
        engine = TrafficEngine(ca_path=certs.ca_path)
        first = engine.pin_hostname(HOSTNAME, "192.0.2.1")
        second = engine.pin_hostname(HOSTNAME, "127.0.0.1")
        report = engine.run_recipe(verify_recipe(origin, Protocol.HTTP, 100))
        assert report.dns_lookups == 0 and report.request_count >= 1
        # releasing a superseded pin must not disturb the active one
        first.release()
        assert engine.run_recipe(
            verify_recipe(origin, Protocol.HTTP, 0)).dns_lookups == 0
        second.release()

    def test_destination_override_costs_no_lookup(self, origin, certs):
        engine = TrafficEngine(ca_path=certs.ca_path)
        recipe = TrafficRecipe(
            experiment=Experiment.HOST_PROBE,
            endpoint=endpoint(origin),
            protocol=Protocol.HTTPS,
            ip_version=IpVersion.V4,
            target_bytes=500,
            presented_hostname=HOSTNAME,
            destination_override="127.0.0.1",
        )
        report = engine.run_recipe(recipe)
        assert report.dns_lookups == 0
        assert report.bytes_total >= 500

    def test_missing_address_family_rejected(self, origin, certs):
        engine = TrafficEngine(ca_path=certs.ca_path)
        recipe = TrafficRecipe(
            experiment=Experiment.VERIFY,
            endpoint=endpoint(origin),
            protocol=Protocol.HTTP,
            ip_version=IpVersion.V6,
            target_bytes=10,
            presented_hostname=HOSTNAME,
        )
        with pytest.raises(RecipeInvalid):
            engine.run_recipe(recipe)

    def test_protocol_not_offered_by_endpoint(self, origin, certs):
        engine = TrafficEngine(ca_path=certs.ca_path)
        recipe = verify_recipe(origin, Protocol.HTTP3,
                               protocols={Protocol.HTTP, Protocol.HTTPS})
        with pytest.raises(ProtocolUnsupported):
            engine.run_recipe(recipe)


class TestFetching:
    @pytest.mark.parametrize("protocol", list(Protocol))
    def test_reaches_target_with_modest_overshoot(self, origin, certs, protocol):
        engine = TrafficEngine(ca_path=certs.ca_path)
        target = 10_000
        report = engine.run_recipe(verify_recipe(origin, protocol, target))
        assert report.bytes_total >= target
        # overshoot is bounded by one request/response exchange
        assert report.bytes_total < target + len(BODY) + 2048
        assert report.request_count >= 2

    def test_404_counts_bytes_and_warns(self, origin, certs):
        engine = TrafficEngine(ca_path=certs.ca_path)
        recipe = TrafficRecipe(
            experiment=Experiment.VERIFY,
            endpoint=EndpointSpec(
                application="App", hostname=HOSTNAME, resource_path="/missing",
                addresses_v4=("127.0.0.1",),
                ports={"http": origin.http_port},
            ),
            protocol=Protocol.HTTP,
            ip_version=IpVersion.V4,
            target_bytes=200,
            presented_hostname=HOSTNAME,
        )
        report = engine.run_recipe(recipe)
        assert report.bytes_total >= 200
        assert any("404" in w for w in report.warnings)
        assert len(report.warnings) == 1  # deduplicated


class TestCertificateHandling:
    def test_verify_rejects_unknown_ca_but_counts_bytes(self, origin, wrong_certs):
        engine = TrafficEngine(ca_path=wrong_certs.ca_path)
        with pytest.raises(ProtocolUnsupported):
            engine.run_recipe(verify_recipe(origin, Protocol.HTTPS, 500))

    def test_ip_probe_skips_validation(self, origin, wrong_certs):
        engine = TrafficEngine(ca_path=wrong_certs.ca_path)
        recipe = TrafficRecipe(
            experiment=Experiment.IP_PROBE,
            endpoint=endpoint(origin),
            protocol=Protocol.HTTPS,
            ip_version=IpVersion.V4,
            target_bytes=500,
            presented_hostname="example.com",
        )
        report = engine.run_recipe(recipe)
        assert report.bytes_total >= 500

    def test_h3_verify_rejects_unknown_ca(self, origin, wrong_certs):
        engine = TrafficEngine(ca_path=wrong_certs.ca_path)
        with pytest.raises(H3CertificateRejected):
            engine.run_recipe(verify_recipe(origin, Protocol.HTTP3, 500))


class TestProbeSupport:
    def test_matrix_reflects_origin_capabilities(self, certs):
        # an origin without an h3 listener and without a v6 address
        server = OriginServer(ResourceSet({"/r": BODY}), cert_store=certs,
                              protocols=("http", "https"))
        server.start()
        try:
            spec = EndpointSpec(
                application="App", hostname=HOSTNAME, resource_path="/r",
                addresses_v4=("127.0.0.1",),
                ports={"http": server.http_port, "https": server.https_port,
                       "http3": 1},
            )
            engine = TrafficEngine(ca_path=certs.ca_path, timeout=2.0)
            matrix = engine.probe_endpoint_support(spec)
            assert matrix[(Protocol.HTTP, IpVersion.V4)]
            assert matrix[(Protocol.HTTPS, IpVersion.V4)]
            assert not matrix[(Protocol.HTTP3, IpVersion.V4)]
            assert not any(matrix[(p, IpVersion.V6)] for p in Protocol)
        finally:
            server.stop()
