"""Classification rules: matching semantics, roaming gate, serialization."""

import random

import pytest

from zraudit.endpoints import IpVersion, Protocol
from zraudit.sim.rules import (
    ALL_CLASSES,
    ClassificationRule,
    FlowClass,
    OperatorProfile,
    RoamingMode,
    RuleError,
    SessionKind,
    classes_https_only,
    classes_tcp_only,
    classes_v4_only,
    classify_flow,
    hostname_matches,
    matching_rule,
)


def fc(protocol="https", version="v4"):
    return FlowClass(Protocol(protocol), IpVersion(version))


class TestHostnameMatches:
    @pytest.mark.parametrize("pattern,hostname,expected", [
        ("static.whatsapp.net", "static.whatsapp.net", True),
        ("static.whatsapp.net", "Static.WhatsApp.NET", True),
        ("static.whatsapp.net", "static.whatsapp.net.", True),
        ("static.whatsapp.net", "evil-static.whatsapp.net.attacker.example", False),
        (".fbcdn.net", "scontent.xx.fbcdn.net", True),
        (".fbcdn.net", "fbcdn.net", True),
        (".fbcdn.net", "notfbcdn.net", False),
        ("*.fbcdn.net", "scontent.xx.fbcdn.net", True),
        ("a.example", "b.example", False),
    ])
    def test_cases(self, pattern, hostname, expected):
        assert hostname_matches(pattern, hostname) is expected


class TestRuleMatching:
    def test_ip_prefix_v4(self):
        rule = ClassificationRule("r1", "ip-prefix", "203.0.113.0/24")
        assert rule.matches("203.0.113.10", None, fc())
        assert not rule.matches("203.0.114.10", None, fc())
        assert not rule.matches("2001:db8::10", None, fc(version="v6"))
        assert not rule.matches("not-an-ip", None, fc())

    def test_ip_prefix_v6(self):
        rule = ClassificationRule("r1", "ip-prefix", "2001:db8::/64")
        assert rule.matches("2001:db8::20", None, fc("http3", "v6"))
        assert not rule.matches("203.0.113.10", None, fc())

    def test_hostname_rule_needs_extracted_name(self):
        rule = ClassificationRule("r2", "hostname", "app.snapchat.com")
        assert rule.matches("203.0.113.20", "app.snapchat.com", fc())
        assert not rule.matches("203.0.113.20", None, fc())

    def test_applies_to_restricts_class(self):
        rule = ClassificationRule("r3", "ip-prefix", "203.0.113.0/24",
                                  applies_to=classes_https_only())
        assert rule.matches("203.0.113.1", None, fc("https", "v4"))
        assert not rule.matches("203.0.113.1", None, fc("http", "v4"))
        assert not rule.matches("203.0.113.1", None, fc("http3", "v4"))

    def test_validation(self):
        with pytest.raises(RuleError):
            ClassificationRule("bad", "regex", ".*")
        with pytest.raises(RuleError):
            ClassificationRule("bad", "ip-prefix", "999.0.0.0/8")
        with pytest.raises(RuleError):
            ClassificationRule("bad", "hostname", "x", applies_to=frozenset())


class TestClassHelpers:
    def test_partitions(self):
        assert len(ALL_CLASSES) == 6
        assert all(c.ip_version is IpVersion.V4 for c in classes_v4_only())
        assert all(c.protocol is Protocol.HTTPS for c in classes_https_only())
        assert classes_tcp_only() == frozenset(
            c for c in ALL_CLASSES if c.protocol is not Protocol.HTTP3
        )

    def test_flow_class_parse_roundtrip(self):
        for c in ALL_CLASSES:
            assert FlowClass.parse(str(c)) == c


class TestClassifyFlow:
    def profile(self, rules, roaming=RoamingMode.NOT_OFFERED):
        return OperatorProfile(name="op", rules=rules, roaming=roaming)

    def test_first_matching_rule_wins(self):
        rules = [
            ClassificationRule("a", "ip-prefix", "203.0.113.0/24", pool="pool-a"),
            ClassificationRule("b", "hostname", "x.example", pool="pool-b"),
        ]
        profile = self.profile(rules)
        assert classify_flow(profile, SessionKind.DOMESTIC,
                             "203.0.113.9", fc(), "x.example") == "pool-a"
        assert classify_flow(profile, SessionKind.DOMESTIC,
                             "198.51.100.9", fc(), "x.example") == "pool-b"
        assert classify_flow(profile, SessionKind.DOMESTIC,
                             "198.51.100.9", fc(), None) is None
        assert matching_rule(profile, SessionKind.DOMESTIC,
                             "203.0.113.9", fc(), None).rule_id == "a"

    @pytest.mark.parametrize("roaming,zero_rated", [
        (RoamingMode.NOT_OFFERED, False),
        (RoamingMode.HOME_ROUTED_ZERO_RATING_OFF, False),
        (RoamingMode.HOME_ROUTED_ZERO_RATING_ON, True),
    ])
    def test_roaming_gate(self, roaming, zero_rated):
        profile = self.profile(
            [ClassificationRule("a", "ip-prefix", "203.0.113.0/24")], roaming)
        pool = classify_flow(profile, SessionKind.ROAMING,
                             "203.0.113.9", fc(), None)
        assert (pool is not None) is zero_rated
        # domestic classification is unaffected by roaming mode
        assert classify_flow(profile, SessionKind.DOMESTIC,
                             "203.0.113.9", fc(), None) is not None

    def test_disjunction_property_brute_force(self):
        """classify_flow is exactly 'any rule matches' for random rule sets."""
        rng = random.Random(1312)
        prefixes = ["203.0.113.0/24", "198.51.100.0/25", "2001:db8::/64"]
        names = ["a.example", ".b.example", "c.example"]
        subsets = [frozenset(ALL_CLASSES), classes_v4_only(),
                   classes_https_only(), classes_tcp_only()]
        ips = ["203.0.113.7", "198.51.100.200", "192.0.2.1", "2001:db8::9"]
        hosts = [None, "a.example", "sub.b.example", "c.example", "d.example"]
        for _ in range(300):
            rules = [
                ClassificationRule(
                    f"r{i}",
                    *(("ip-prefix", rng.choice(prefixes)) if rng.random() < 0.5
                      else ("hostname", rng.choice(names))),
                    applies_to=rng.choice(subsets),
                )
                for i in range(rng.randrange(4))
            ]
            profile = self.profile(rules)
            ip, host = rng.choice(ips), rng.choice(hosts)
            flow = rng.choice(sorted(ALL_CLASSES))
            expected = any(r.matches(ip, host, flow) for r in rules)
            got = classify_flow(profile, SessionKind.DOMESTIC, ip, flow, host)
            assert (got is not None) is expected


class TestFixtureProfiles:
    def test_hostname_rule_scoped_away_from_http3_bills_quic(self):
        """A rule restricted to TCP classes leaves HTTP/3 traffic billed
        even though the hostname matches."""
        from pathlib import Path
        profile = OperatorProfile.load(
            Path(__file__).parent / "fixtures" / "profile_hr1_sept2021.json")
        args = ("198.51.100.1", "app.snapchat.com")
        zero = lambda flow: classify_flow(
            profile, SessionKind.DOMESTIC, args[0], flow, args[1])
        assert zero(fc("https", "v4")) is not None
        assert zero(fc("http", "v4")) is not None
        assert zero(fc("http3", "v4")) is None


class TestProfileSerialization:
    def test_roundtrip(self, tmp_path):
        profile = OperatorProfile(
            name="AT-1",
            rules=[
                ClassificationRule("wa", "ip-prefix", "203.0.113.0/28"),
                ClassificationRule("sc", "hostname", "app.snapchat.com",
                                   applies_to=classes_v4_only(), pool="zr"),
            ],
            quota_bytes=10**9,
            granularity=1000,
            billing_lag=5.0,
            roaming=RoamingMode.HOME_ROUTED_ZERO_RATING_ON,
            subscriber_id="sub-1",
        )
        path = tmp_path / "profile.json"
        profile.save(path)
        assert OperatorProfile.load(path) == profile

    def test_defaults_from_minimal_dict(self):
        profile = OperatorProfile.from_dict({"name": "x"})
        assert profile.rules == []
        assert profile.roaming is RoamingMode.NOT_OFFERED
        assert profile.granularity == 1
