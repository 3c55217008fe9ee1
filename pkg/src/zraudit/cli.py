"""zr-audit command line interface.

Subcommands: run (execute a campaign), validate (check a config),
sim (launch a standalone simulated operator), probe-endpoint (check which
protocol/IP-version pairs an endpoint supports).

Exit codes: 0 success, 2 invalid configuration/arguments, 3 campaign aborted.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading

from . import ZrAuditError
from .endpoints import EndpointSpec, IpVersion, Protocol
from .engine import TrafficEngine
from .orchestrator import (
    CampaignConfig,
    CampaignRunner,
    ConfigInvalid,
    DeskEnvironment,
    validate_config,
)
from .report import emit_reports, render_text
from .sim.control import MnoSim
from .sim.gateway import NetworkMap
from .sim.rules import OperatorProfile

EXIT_OK = 0
EXIT_CONFIG_INVALID = 2
EXIT_CAMPAIGN_ABORTED = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zr-audit",
        description="Zero-rating audit toolkit: campaign runner, "
                    "operator simulator and endpoint prober.",
    )
    parser.add_argument("--verbose", "-v", action="store_true",
                        help="enable debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run an experiment campaign")
    run.add_argument("--config", required=True, help="campaign config (JSON)")
    run.add_argument("--only-operator", action="append", default=[],
                     metavar="NAME", help="restrict the campaign to an operator "
                     "(repeatable)")
    run.add_argument("--report-dir", default="reports")
    run.add_argument("--formats", default="json,csv,text",
                     help="comma-separated: json,csv,text")
    run.add_argument("--normalize-timestamps", action="store_true",
                     help="omit timestamps for byte-identical reruns")

    validate = commands.add_parser("validate", help="validate a campaign config")
    validate.add_argument("--config", required=True)

    sim = commands.add_parser("sim", help="launch a standalone operator simulator")
    sim.add_argument("--profile", required=True, help="operator profile (JSON)")
    sim.add_argument("--listen", default="127.0.0.1")
    sim.add_argument("--map", dest="maps", action="append", default=[],
                     metavar="TRANSPORT:DEST_IP:DEST_PORT=HOST:PORT",
                     help="network-map entry from simulated destination to a "
                          "real address (repeatable)")

    probe = commands.add_parser("probe-endpoint",
                                help="probe protocol/IP-version support")
    probe.add_argument("--host", required=True, help="endpoint hostname")
    probe.add_argument("--path", required=True, help="resource path")
    probe.add_argument("--v4", action="append", default=[], metavar="ADDR")
    probe.add_argument("--v6", action="append", default=[], metavar="ADDR")
    probe.add_argument("--port", action="append", default=[],
                       metavar="PROTOCOL=PORT", help="port override, e.g. https=8443")
    return parser


def _cmd_run(args) -> int:
    try:
        config = CampaignConfig.load(args.config)
    except ConfigInvalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_INVALID
    if args.only_operator:
        known = {op.name for op in config.operators}
        unknown = set(args.only_operator) - known
        if unknown:
            print(f"error: unknown operator(s): {sorted(unknown)}", file=sys.stderr)
            return EXIT_CONFIG_INVALID
        config.operators = [
            op for op in config.operators if op.name in set(args.only_operator)
        ]
    problems = validate_config(config)
    if problems:
        for problem in problems:
            print(f"config problem: {problem}", file=sys.stderr)
        return EXIT_CONFIG_INVALID
    formats = tuple(f.strip() for f in args.formats.split(",") if f.strip())
    with DeskEnvironment(config) as desk:
        report = CampaignRunner(config, desk).run()
    written = emit_reports(report, args.report_dir, formats=formats,
                           normalize_timestamps=args.normalize_timestamps)
    print(render_text(report), end="")
    for fmt, path in written.items():
        print(f"wrote {fmt}: {path}", file=sys.stderr)
    return EXIT_CAMPAIGN_ABORTED if report.aborted else EXIT_OK


def _cmd_validate(args) -> int:
    try:
        config = CampaignConfig.load(args.config)
    except ConfigInvalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_INVALID
    problems = validate_config(config)
    if problems:
        for problem in problems:
            print(f"config problem: {problem}", file=sys.stderr)
        return EXIT_CONFIG_INVALID
    print("config ok")
    return EXIT_OK


def _cmd_sim(args) -> int:
    try:
        profile = OperatorProfile.load(args.profile)
    except (OSError, ValueError, KeyError, ZrAuditError) as exc:
        print(f"error: cannot load profile: {exc}", file=sys.stderr)
        return EXIT_CONFIG_INVALID
    network_map = NetworkMap()
    try:
        for entry in args.maps:
            key, value = entry.split("=", 1)
            transport, dest_ip, dest_port = key.split(":", 1)[0], *key.split(":", 1)[1].rsplit(":", 1)
            host, port = value.rsplit(":", 1)
            network_map.add(dest_ip, int(dest_port), transport, host, int(port))
    except ValueError as exc:
        print(f"error: bad --map entry: {exc}", file=sys.stderr)
        return EXIT_CONFIG_INVALID
    sim = MnoSim(profile, network_map, host=args.listen)
    sim.start()
    print(json.dumps({
        "operator": profile.name,
        "listen": args.listen,
        "tcp_port": sim.tcp_port,
        "udp_port": sim.udp_port,
        "control_port": sim.control_port,
        "quota_url": sim.quota_url(),
    }), flush=True)
    stop = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()
    sim.stop()
    return EXIT_OK


def _cmd_probe_endpoint(args) -> int:
    if not args.v4 and not args.v6:
        print("error: give at least one --v4 or --v6 address", file=sys.stderr)
        return EXIT_CONFIG_INVALID
    ports = {}
    for override in args.port:
        try:
            protocol, port = override.split("=", 1)
            ports[Protocol(protocol).value] = int(port)
        except ValueError as exc:
            print(f"error: bad --port entry {override!r}: {exc}", file=sys.stderr)
            return EXIT_CONFIG_INVALID
    endpoint = EndpointSpec(
        application=args.host,
        hostname=args.host,
        resource_path=args.path,
        addresses_v4=tuple(args.v4),
        addresses_v6=tuple(args.v6),
        ports=ports,
    )
    engine = TrafficEngine()
    matrix = engine.probe_endpoint_support(endpoint)
    for protocol in Protocol:
        cells = "  ".join(
            f"{version.value}={'yes' if matrix[(protocol, version)] else 'no'}"
            for version in IpVersion
        )
        print(f"{protocol.value:<6} {cells}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    handlers = {
        "run": _cmd_run,
        "validate": _cmd_validate,
        "sim": _cmd_sim,
        "probe-endpoint": _cmd_probe_endpoint,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
