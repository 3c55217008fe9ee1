"""Report rendering and the zr-audit command line interface."""

import json
from pathlib import Path

import pytest

from zraudit.cli import main
from zraudit.endpoints import Experiment, IpVersion, Protocol
from zraudit.orchestrator import (
    CampaignReport,
    CellEvidence,
    Classification,
    OperatorResult,
    Qualifier,
    Verdict,
)
from zraudit.report import (
    IoFailure,
    emit_reports,
    load_json_report,
    render_csv,
    render_json,
    render_text,
)

FIXTURES = Path(__file__).parent / "fixtures"


def sample_report():
    def verdict(op, app, classification, qualifiers=()):
        return Verdict(op, app, classification, qualifiers=tuple(qualifiers))

    return CampaignReport(
        applications=("A", "B"),
        operators=(
            OperatorResult("OP-1", "yes", (
                verdict("OP-1", "A", Classification.IP_ONLY,
                        [Qualifier.IPV4_ONLY]),
                verdict("OP-1", "B", Classification.FULLY_BILLED),
            )),
            OperatorResult("OP-2", "not-offered", (
                verdict("OP-2", "A", Classification.IP_AND_HOST,
                        [Qualifier.HTTPS_ONLY]),
                verdict("OP-2", "B", Classification.NOT_AVAILABLE),
            )),
        ),
        generated_at=42.0,
    )


class TestRenderText:
    def test_layout_and_footnotes(self):
        text = render_text(sample_report())
        lines = text.splitlines()
        assert lines[0].split() == ["Operator", "Roaming", "A", "B"]
        assert set(lines[1]) <= {"-", " "}
        assert lines[2].split() == ["OP-1", "Yes", "IP^a", "$"]
        assert lines[3].split() == ["OP-2", "×", "IP,", "Host^b", "×"]
        # footnote letters are assigned in first-use order
        assert any(line.startswith("^a IPv4 only") for line in lines)
        assert any(line.startswith("^b HTTPS only") for line in lines)
        assert "$ traffic fully billed." in text

    def test_deterministic(self):
        assert render_text(sample_report()) == render_text(sample_report())

    def test_missing_verdict_rendered_as_not_in_tariff(self):
        report = CampaignReport(
            applications=("A", "B"),
            operators=(OperatorResult("OP-1", "no", (
                Verdict("OP-1", "A", Classification.HOST_ONLY),)),),
        )
        row = render_text(report).splitlines()[2]
        assert row.split() == ["OP-1", "No", "Host", "×"]


class TestRenderStructured:
    def test_csv(self):
        lines = render_csv(sample_report()).splitlines()
        assert lines[0] == "operator,application,classification,qualifiers,roaming"
        assert "OP-1,A,ip-only,ipv4-only,yes" in lines
        assert "OP-2,B,not-available,,not-offered" in lines

    def test_json_roundtrip(self, tmp_path):
        report = sample_report()
        path = tmp_path / "report.json"
        path.write_text(render_json(report))
        assert load_json_report(path) == report

    def test_json_normalized_timestamps_are_reproducible(self):
        a = render_json(sample_report(), normalize_timestamps=True)
        b = render_json(CampaignReport(
            applications=sample_report().applications,
            operators=sample_report().operators,
            generated_at=99.0,
        ), normalize_timestamps=True)
        assert a == b
        assert json.loads(a)["generated_at"] is None


class TestEmitReports:
    def test_writes_requested_formats(self, tmp_path):
        written = emit_reports(sample_report(), tmp_path / "out",
                               formats=("json", "text"))
        assert sorted(written) == ["json", "text"]
        assert (tmp_path / "out" / "report.json").exists()
        assert (tmp_path / "out" / "report.txt").exists()
        assert not (tmp_path / "out" / "report.csv").exists()

    def test_unknown_format(self, tmp_path):
        with pytest.raises(IoFailure):
            emit_reports(sample_report(), tmp_path, formats=("yaml",))

    def test_unreadable_report(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(IoFailure):
            load_json_report(bad)
        with pytest.raises(IoFailure):
            load_json_report(tmp_path / "missing.json")


class TestCliValidate:
    def test_valid_config(self, capsys):
        code = main(["validate", "--config",
                     str(FIXTURES / "campaign_seven_operators.json")])
        assert code == 0
        assert "config ok" in capsys.readouterr().out

    def test_missing_config(self, capsys):
        assert main(["validate", "--config", "/nonexistent.json"]) == 2

    def test_invalid_config(self, tmp_path, capsys):
        config = json.loads((FIXTURES / "campaign_seven_operators.json").read_text())
        config["base_unit"] = 1  # below twice any granularity
        # profiles resolve relative to the config file: keep it in fixtures
        path = FIXTURES / "_invalid_tmp.json"
        path.write_text(json.dumps(config))
        try:
            assert main(["validate", "--config", str(path)]) == 2
            assert "config problem" in capsys.readouterr().err
        finally:
            path.unlink()


class TestCliRun:
    def config_path(self, tmp_path):
        """A one-operator, fully-billed campaign: fast and abort-free."""
        config = {
            "applications": ["App"],
            "endpoints": [{
                "application": "App",
                "hostname": "app.example",
                "resource_path": "/r",
                "addresses_v4": ["203.0.113.10"],
            }],
            "control_endpoint": {
                "application": "control",
                "hostname": "control.example",
                "resource_path": "/bytes/2048",
                "addresses_v4": ["192.0.2.250"],
            },
            "operators": [{
                "profile": {"name": "OP-1", "subscriber_id": "s1"},
                "applications": ["App"],
            }],
            "settle_timeout": 30.0,
            "roaming_dwell": 0.0,
        }
        path = tmp_path / "campaign.json"
        path.write_text(json.dumps(config))
        return path

    def test_run_writes_reports_and_prints_table(self, tmp_path, capsys):
        code = main(["run", "--config", str(self.config_path(tmp_path)),
                     "--report-dir", str(tmp_path / "reports"),
                     "--normalize-timestamps"])
        captured = capsys.readouterr()
        assert code == 0
        assert "OP-1" in captured.out
        report = load_json_report(tmp_path / "reports" / "report.json")
        assert report.operators[0].verdicts[0].classification \
            is Classification.FULLY_BILLED
        assert (tmp_path / "reports" / "report.csv").exists()
        assert (tmp_path / "reports" / "report.txt").exists()

    def test_unknown_operator_filter(self, tmp_path, capsys):
        code = main(["run", "--config", str(self.config_path(tmp_path)),
                     "--only-operator", "NOPE",
                     "--report-dir", str(tmp_path / "reports")])
        assert code == 2


class TestCliProbeEndpoint:
    def test_requires_an_address(self, capsys):
        assert main(["probe-endpoint", "--host", "x.example",
                     "--path", "/r"]) == 2

    def test_prints_matrix(self, capsys):
        # 192.0.2.1 is unreachable: every pair reports "no", quickly or not at
        # all depending on the platform, so probe a closed local port instead
        code = main(["probe-endpoint", "--host", "x.example", "--path", "/r",
                     "--v4", "127.0.0.1",
                     "--port", "http=1", "--port", "https=1", "--port", "http3=1"])
        captured = capsys.readouterr()
        assert code == 0
        lines = [l for l in captured.out.splitlines() if l.strip()]
        assert len(lines) == 3
        for line in lines:
            assert "v4=no" in line and "v6=no" in line

    def test_bad_port_override(self, capsys):
        assert main(["probe-endpoint", "--host", "x", "--path", "/",
                     "--v4", "127.0.0.1", "--port", "https=abc"]) == 2
