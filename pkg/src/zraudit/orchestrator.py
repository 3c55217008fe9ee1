"""Campaign orchestration: cells, sessions, verdict inference.

A campaign runs, per operator, the three experiments across protocols and IP
versions.  Each *cell* is one (application, experiment, protocol, ip version)
combination; cells are grouped into *sessions* of at most
``max_cells_per_session`` payloads, multiplexed with power-of-two sizes by
the billing codec, followed by control traffic and a settled quota read whose
delta decodes into per-cell billed flags.

Cell order is a pure documented function: within a session, cells are sorted
by (application index in the config, protocol order HTTP < HTTPS < HTTP3,
ip version order v4 < v6, experiment order verify < ip-probe < host-probe),
and payload index i (size base_unit * 2**i) is the cell's position in that
sorted list.  Phases run verify cells first; applications whose verify cells
are all billed are reported FullyBilled and their probe cells are skipped,
as are probes for (protocol, version) pairs whose verify cell was billed
(a rule that does not zero-rate the genuine traffic cannot zero-rate a
probe of the same pair).
"""

from __future__ import annotations

import enum
import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import ZrAuditError
from .certs import CertStore
from .codec import (
    CodecError,
    decode_billing,
    max_payloads_for_quota,
    plan_session,
)
from .endpoints import (
    EXPERIMENT_ORDER,
    PROTOCOL_ORDER,
    VERSION_ORDER,
    EndpointSpec,
    Experiment,
    IpVersion,
    Protocol,
)
from .engine import TrafficEngine, TrafficRecipe
from .forwarder import Forwarder, ForwarderSpec, PortMap
from .quota import AdapterSpec, QuotaAdapter, await_settled_quota
from .routes import GatewayRoute
from .sim.control import MnoSim
from .sim.gateway import NetworkMap
from .sim.origin import OriginServer, ResourceSet, pattern_bytes
from .sim.rules import (
    FlowClass,
    OperatorProfile,
    RoamingMode,
    SessionKind,
    classify_flow,
)

log = logging.getLogger(__name__)


class OrchestratorError(ZrAuditError):
    pass


class ConfigInvalid(OrchestratorError):
    pass


class InsufficientEvidence(OrchestratorError):
    pass


class Classification(str, enum.Enum):
    IP_ONLY = "ip-only"
    HOST_ONLY = "host-only"
    IP_AND_HOST = "ip-and-host"
    FULLY_BILLED = "fully-billed"
    NOT_AVAILABLE = "not-available"
    # extensions beyond the tabular report vocabulary:
    UNKNOWN = "unknown"  # zero-rated but neither probe triggers
    INDETERMINATE = "indeterminate"  # operator aborted mid-campaign


class Qualifier(str, enum.Enum):
    IPV4_ONLY = "ipv4-only"
    HTTPS_ONLY = "https-only"
    TCP_ONLY = "tcp-only"
    UNKNOWN_MECHANISM = "unknown-mechanism"
    PARTIAL = "partial"  # mechanism set matches no standard footnote


ROAMING_YES = "yes"
ROAMING_NO = "no"
ROAMING_NOT_OFFERED = "not-offered"
ROAMING_INDETERMINATE = "indeterminate"


# --- campaign configuration ---------------------------------------------------


@dataclass(frozen=True)
class OperatorConfig:
    profile: OperatorProfile
    applications: tuple[str, ...]  # applications included in the tariff
    ip_versions: tuple[IpVersion, ...] = (IpVersion.V4,)

    @property
    def name(self) -> str:
        return self.profile.name


@dataclass
class CampaignConfig:
    endpoints: dict[str, EndpointSpec]  # application -> endpoint
    operators: list[OperatorConfig]
    control_endpoint: EndpointSpec
    applications: tuple[str, ...] = ()  # column order; defaults to endpoint order
    base_unit: int = 65536
    slack_budget: int = 16384
    max_cells_per_session: int = 3
    settle_timeout: float = 90.0
    min_poll_interval: float = 1.0
    roaming_dwell: float = 60.0
    dummy_hostname: str = "example.com"
    body_bytes: int = 2048
    parallel_operators: int = 4

    def __post_init__(self):
        if not self.applications:
            self.applications = tuple(self.endpoints)

    @classmethod
    def load(cls, path: str | Path) -> "CampaignConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw, base_dir=path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "CampaignConfig":
        try:
            endpoints = {
                e["application"]: EndpointSpec.from_dict(e)
                for e in raw["endpoints"]
            }
            operators = []
            for op in raw["operators"]:
                if "profile_path" in op:
                    profile_path = Path(op["profile_path"])
                    if base_dir is not None and not profile_path.is_absolute():
                        profile_path = base_dir / profile_path
                    profile = OperatorProfile.load(profile_path)
                else:
                    profile = OperatorProfile.from_dict(op["profile"])
                operators.append(
                    OperatorConfig(
                        profile=profile,
                        applications=tuple(op["applications"]),
                        ip_versions=tuple(
                            IpVersion(v) for v in op.get("ip_versions", ["v4"])
                        ),
                    )
                )
            return cls(
                endpoints=endpoints,
                operators=operators,
                control_endpoint=EndpointSpec.from_dict(raw["control_endpoint"]),
                applications=tuple(raw.get("applications", ())),
                base_unit=int(raw.get("base_unit", 65536)),
                slack_budget=int(raw.get("slack_budget", 16384)),
                max_cells_per_session=int(raw.get("max_cells_per_session", 3)),
                settle_timeout=float(raw.get("settle_timeout", 90.0)),
                min_poll_interval=float(raw.get("min_poll_interval", 1.0)),
                roaming_dwell=float(raw.get("roaming_dwell", 60.0)),
                dummy_hostname=raw.get("dummy_hostname", "example.com"),
                body_bytes=int(raw.get("body_bytes", 2048)),
                parallel_operators=int(raw.get("parallel_operators", 4)),
            )
        except (KeyError, TypeError, ValueError, ZrAuditError) as exc:
            raise ConfigInvalid(f"malformed campaign config: {exc}") from exc


def validate_config(config: CampaignConfig) -> list[str]:
    """Returns a list of human-readable problems; empty means valid."""
    problems: list[str] = []
    control = config.control_endpoint
    for opconfig in config.operators:
        profile = opconfig.profile
        # the control endpoint must never be zero-rated
        for protocol in Protocol:
            for version in IpVersion:
                flow_class = FlowClass(protocol, version)
                for address in control.addresses(version):
                    if classify_flow(profile, SessionKind.DOMESTIC, address,
                                     flow_class, control.hostname) is not None:
                        problems.append(
                            f"{profile.name}: control endpoint {control.hostname}"
                            f"/{address} matches a zero-rating rule"
                        )
        for application in opconfig.applications:
            endpoint = config.endpoints.get(application)
            if endpoint is None:
                problems.append(
                    f"{profile.name}: no endpoint for application {application!r}"
                )
                continue
            for version in opconfig.ip_versions:
                if not endpoint.addresses(version):
                    problems.append(
                        f"{profile.name}: endpoint {endpoint.hostname} has no "
                        f"{version.value} address"
                    )
        if config.base_unit < 2 * profile.granularity:
            problems.append(
                f"{profile.name}: base_unit {config.base_unit} below twice the "
                f"reporting granularity {profile.granularity}"
            )
        # worst case: every cell runs (verify + both probes), plus roaming
        cells = (
            len(opconfig.applications) * len(PROTOCOL_ORDER)
            * len(opconfig.ip_versions) * len(EXPERIMENT_ORDER) + 1
        )
        sessions = math.ceil(cells / config.max_cells_per_session)
        per_session = config.base_unit * (2 ** (config.max_cells_per_session + 1) - 1)
        if max_payloads_for_quota(profile.quota_bytes, config.base_unit) < 1 \
                or sessions * per_session > profile.quota_bytes:
            problems.append(
                f"{profile.name}: quota {profile.quota_bytes} insufficient for "
                f"worst-case campaign traffic {sessions * per_session}"
            )
    if not config.operators:
        problems.append("no operators configured")
    return problems


# --- evidence and verdicts ------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    application: str
    experiment: Experiment
    protocol: Protocol
    ip_version: IpVersion


def cell_sort_key(config: CampaignConfig, cell: Cell) -> tuple[int, int, int, int]:
    """The documented payload-index ordering (see module docstring)."""
    return (
        config.applications.index(cell.application),
        PROTOCOL_ORDER.index(cell.protocol),
        VERSION_ORDER.index(cell.ip_version),
        EXPERIMENT_ORDER.index(cell.experiment),
    )


@dataclass(frozen=True)
class CellEvidence:
    experiment: Experiment
    protocol: Protocol
    ip_version: IpVersion
    billed: bool | None  # None: indeterminate (aborted / skipped by failure)
    payload_bytes: int = 0

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment.value,
            "protocol": self.protocol.value,
            "ip_version": self.ip_version.value,
            "billed": self.billed,
            "payload_bytes": self.payload_bytes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CellEvidence":
        return cls(
            experiment=Experiment(d["experiment"]),
            protocol=Protocol(d["protocol"]),
            ip_version=IpVersion(d["ip_version"]),
            billed=d["billed"],
            payload_bytes=int(d.get("payload_bytes", 0)),
        )


@dataclass(frozen=True)
class Verdict:
    operator: str
    application: str
    classification: Classification
    qualifiers: tuple[Qualifier, ...] = ()
    evidence: tuple[CellEvidence, ...] = ()

    def to_dict(self) -> dict:
        return {
            "operator": self.operator,
            "application": self.application,
            "classification": self.classification.value,
            "qualifiers": [q.value for q in self.qualifiers],
            "evidence": [e.to_dict() for e in self.evidence],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Verdict":
        return cls(
            operator=d["operator"],
            application=d["application"],
            classification=Classification(d["classification"]),
            qualifiers=tuple(Qualifier(q) for q in d.get("qualifiers", [])),
            evidence=tuple(CellEvidence.from_dict(e) for e in d.get("evidence", [])),
        )


@dataclass(frozen=True)
class OperatorResult:
    operator: str
    roaming: str
    verdicts: tuple[Verdict, ...]
    aborted: bool = False
    abort_reason: str = ""

    def to_dict(self) -> dict:
        return {
            "operator": self.operator,
            "roaming": self.roaming,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OperatorResult":
        return cls(
            operator=d["operator"],
            roaming=d["roaming"],
            verdicts=tuple(Verdict.from_dict(v) for v in d.get("verdicts", [])),
            aborted=bool(d.get("aborted", False)),
            abort_reason=d.get("abort_reason", ""),
        )


@dataclass(frozen=True)
class CampaignReport:
    applications: tuple[str, ...]
    operators: tuple[OperatorResult, ...]
    generated_at: float | None = None

    @property
    def aborted(self) -> bool:
        return any(op.aborted for op in self.operators)

    def to_dict(self, normalize_timestamps: bool = False) -> dict:
        return {
            "applications": list(self.applications),
            "operators": [op.to_dict() for op in self.operators],
            "generated_at": None if normalize_timestamps else self.generated_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignReport":
        return cls(
            applications=tuple(d["applications"]),
            operators=tuple(OperatorResult.from_dict(op) for op in d["operators"]),
            generated_at=d.get("generated_at"),
        )


Pair = tuple[Protocol, IpVersion]


def _mechanism_qualifier(
    zero_pairs: set[Pair], tested_pairs: set[Pair]
) -> Qualifier | None:
    """Map a mechanism's zero-rated pair set to a standard footnote letter."""
    if zero_pairs == tested_pairs:
        return None
    v4_pairs = {p for p in tested_pairs if p[1] is IpVersion.V4}
    https_pairs = {p for p in tested_pairs if p[0] is Protocol.HTTPS}
    tcp_pairs = {p for p in tested_pairs if p[0] is not Protocol.HTTP3}
    if v4_pairs != tested_pairs and zero_pairs == v4_pairs:
        return Qualifier.IPV4_ONLY
    if https_pairs != tested_pairs and zero_pairs == https_pairs:
        return Qualifier.HTTPS_ONLY
    if tcp_pairs != tested_pairs and zero_pairs == tcp_pairs:
        return Qualifier.TCP_ONLY
    return Qualifier.PARTIAL


def infer_verdict(
    operator: str,
    application: str,
    evidence: list[CellEvidence],
    tested_pairs: set[Pair],
) -> Verdict:
    """Derive the tabular verdict for one application.

    Probe cells absent from the evidence were skipped because the pair's
    verify cell was billed; they are treated as billed (a rule that bills
    genuine traffic cannot zero-rate a probe of the same pair).
    """
    by_cell = {(e.experiment, e.protocol, e.ip_version): e for e in evidence}
    for pair in tested_pairs:
        verify = by_cell.get((Experiment.VERIFY, *pair))
        if verify is None or verify.billed is None:
            raise InsufficientEvidence(
                f"{operator}/{application}: verify cell for "
                f"{pair[0].value}/{pair[1].value} is indeterminate"
            )
    for entry in evidence:
        if entry.billed is None:
            raise InsufficientEvidence(
                f"{operator}/{application}: cell {entry.experiment.value}/"
                f"{entry.protocol.value}/{entry.ip_version.value} is indeterminate"
            )

    def zero(experiment: Experiment, pair: Pair) -> bool:
        entry = by_cell.get((experiment, *pair))
        return entry is not None and entry.billed is False

    verify_zero = {p for p in tested_pairs if zero(Experiment.VERIFY, p)}
    if not verify_zero:
        return Verdict(operator, application, Classification.FULLY_BILLED,
                       evidence=tuple(evidence))

    ip_zero = {p for p in tested_pairs if zero(Experiment.IP_PROBE, p)}
    host_zero = {p for p in tested_pairs if zero(Experiment.HOST_PROBE, p)}

    qualifiers: list[Qualifier] = []
    if ip_zero and host_zero:
        classification = Classification.IP_AND_HOST
    elif ip_zero:
        classification = Classification.IP_ONLY
    elif host_zero:
        classification = Classification.HOST_ONLY
    else:
        classification = Classification.UNKNOWN
        qualifiers.append(Qualifier.UNKNOWN_MECHANISM)
    for mechanism_pairs in (ip_zero, host_zero):
        if mechanism_pairs:
            qualifier = _mechanism_qualifier(mechanism_pairs, tested_pairs)
            if qualifier is not None and qualifier not in qualifiers:
                qualifiers.append(qualifier)
    return Verdict(operator, application, classification,
                   qualifiers=tuple(qualifiers), evidence=tuple(evidence))


# --- desk environment -----------------------------------------------------------


class DeskEnvironment:
    """Everything the campaign needs to run offline: certificates, origins,
    forwarders, a shared network map, and one simulated operator per profile."""

    def __init__(self, config: CampaignConfig, host: str = "127.0.0.1",
                 cert_dir: str | None = None):
        self.config = config
        self.host = host
        hostnames = sorted(
            {e.hostname for e in config.endpoints.values()}
            | {config.control_endpoint.hostname}
        )
        self.certs = CertStore(hostnames, directory=cert_dir)
        self.network_map = NetworkMap()
        self.origins: dict[str, OriginServer] = {}  # hostname -> origin
        self.forwarders: dict[str, Forwarder] = {}  # hostname -> relay
        self._forwarder_addresses: dict[str, dict[IpVersion, str]] = {}
        self.sims: dict[str, MnoSim] = {}

    def start(self) -> None:
        config = self.config
        all_endpoints = list(config.endpoints.values()) + [config.control_endpoint]
        seen: dict[str, EndpointSpec] = {}
        for endpoint in all_endpoints:
            seen.setdefault(endpoint.hostname, endpoint)
        for index, (hostname, endpoint) in enumerate(sorted(seen.items())):
            resources = ResourceSet(
                {endpoint.resource_path: pattern_bytes(config.body_bytes)}
            )
            origin = OriginServer(resources, cert_store=self.certs, host=self.host)
            origin.start()
            self.origins[hostname] = origin
            for version in IpVersion:
                for address in endpoint.addresses(version):
                    self.network_map.add(address, 80, "tcp", self.host, origin.http_port)
                    self.network_map.add(address, 443, "tcp", self.host, origin.https_port)
                    self.network_map.add(address, 443, "udp", self.host, origin.h3_port)
            relay = Forwarder(ForwarderSpec(
                listen_address=self.host,
                port_maps=(
                    PortMap("tcp", 0, self.host, origin.http_port),
                    PortMap("tcp", 0, self.host, origin.https_port),
                    PortMap("udp", 0, self.host, origin.h3_port),
                ),
            ))
            relay.start()
            self.forwarders[hostname] = relay
            fwd_v4 = f"198.51.100.{10 + index}"
            fwd_v6 = f"2001:db8:ffff::{10 + index:x}"
            self._forwarder_addresses[hostname] = {
                IpVersion.V4: fwd_v4, IpVersion.V6: fwd_v6,
            }
            for fwd_ip in (fwd_v4, fwd_v6):
                self.network_map.add(
                    fwd_ip, 80, "tcp", self.host,
                    relay.port_for("tcp", origin.http_port))
                self.network_map.add(
                    fwd_ip, 443, "tcp", self.host,
                    relay.port_for("tcp", origin.https_port))
                self.network_map.add(
                    fwd_ip, 443, "udp", self.host,
                    relay.port_for("udp", origin.h3_port))
        for opconfig in config.operators:
            sim = MnoSim(opconfig.profile, self.network_map, host=self.host)
            sim.start()
            self.sims[opconfig.name] = sim

    def stop(self) -> None:
        for sim in self.sims.values():
            sim.stop()
        for relay in self.forwarders.values():
            relay.stop()
        for origin in self.origins.values():
            origin.stop()

    def forwarder_address(self, application: str, version: IpVersion) -> str:
        hostname = (
            self.config.endpoints[application].hostname
            if application in self.config.endpoints
            else application
        )
        return self._forwarder_addresses[hostname][version]

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()


# --- campaign runner -------------------------------------------------------------


@dataclass
class _OperatorState:
    opconfig: OperatorConfig
    sim: MnoSim
    engine: TrafficEngine
    adapter: QuotaAdapter
    baseline: object = None  # QuotaSnapshot


class CampaignRunner:
    def __init__(self, config: CampaignConfig, desk: DeskEnvironment):
        self.config = config
        self.desk = desk

    def run(self) -> CampaignReport:
        results: dict[str, OperatorResult] = {}
        lock = threading.Lock()

        def run_one(opconfig: OperatorConfig) -> None:
            result = self._run_operator(opconfig)
            with lock:
                results[opconfig.name] = result

        workers = max(1, min(self.config.parallel_operators, len(self.config.operators)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_one, self.config.operators))
        ordered = tuple(results[op.name] for op in self.config.operators)
        return CampaignReport(
            applications=self.config.applications,
            operators=ordered,
            generated_at=time.time(),
        )

    # -- per-operator ---------------------------------------------------------

    def _run_operator(self, opconfig: OperatorConfig) -> OperatorResult:
        sim = self.desk.sims[opconfig.name]
        route = GatewayRoute(self.desk.host, sim.tcp_port, sim.udp_port)
        engine = TrafficEngine(
            route=route,
            ca_path=self.desk.certs.ca_path,
            dummy_hostname=self.config.dummy_hostname,
        )
        adapter = QuotaAdapter(AdapterSpec(
            kind="simulated-api",
            parameters={"url": sim.quota_url(), "source_id": opconfig.name},
            min_poll_interval=self.config.min_poll_interval,
            staleness_bound=opconfig.profile.billing_lag,
        ))
        state = _OperatorState(opconfig, sim, engine, adapter)
        state.baseline = adapter.fetch()
        tested_pairs = {
            (protocol, version)
            for protocol in PROTOCOL_ORDER
            for version in opconfig.ip_versions
        }

        cell_results: dict[Cell, bool | None] = {}
        aborted = False
        abort_reason = ""
        try:
            # phase 1: verify cells
            verify_cells = [
                Cell(app, Experiment.VERIFY, protocol, version)
                for app in opconfig.applications
                for protocol in PROTOCOL_ORDER
                for version in opconfig.ip_versions
            ]
            self._run_phase(state, verify_cells, SessionKind.DOMESTIC, cell_results)

            # phase 2: probes for pairs whose verify was zero-rated
            probe_cells: list[Cell] = []
            for app in opconfig.applications:
                zero_pairs = [
                    pair for pair in sorted(
                        tested_pairs,
                        key=lambda p: (PROTOCOL_ORDER.index(p[0]),
                                       VERSION_ORDER.index(p[1])),
                    )
                    if cell_results.get(
                        Cell(app, Experiment.VERIFY, pair[0], pair[1])
                    ) is False
                ]
                if not zero_pairs:
                    continue  # FullyBilled short-circuit: skip all probes
                for protocol, version in zero_pairs:
                    probe_cells.append(Cell(app, Experiment.IP_PROBE, protocol, version))
                    probe_cells.append(Cell(app, Experiment.HOST_PROBE, protocol, version))
            self._run_phase(state, probe_cells, SessionKind.DOMESTIC, cell_results)
        except CodecError as exc:
            aborted = True
            abort_reason = f"{type(exc).__name__}: {exc}"
            log.error("operator %s aborted: %s", opconfig.name, abort_reason)

        # phase 3: roaming
        if aborted:
            roaming = ROAMING_INDETERMINATE
        else:
            try:
                roaming = self._run_roaming(state, cell_results)
            except CodecError as exc:
                aborted = True
                abort_reason = f"{type(exc).__name__}: {exc}"
                roaming = ROAMING_INDETERMINATE

        verdicts = []
        for app in self.config.applications:
            if app not in opconfig.applications:
                verdicts.append(Verdict(opconfig.name, app, Classification.NOT_AVAILABLE))
                continue
            evidence = [
                CellEvidence(cell.experiment, cell.protocol, cell.ip_version, billed)
                for cell, billed in sorted(
                    cell_results.items(),
                    key=lambda item: cell_sort_key(self.config, item[0]),
                )
                if cell.application == app
            ]
            try:
                verdicts.append(
                    infer_verdict(opconfig.name, app, evidence, tested_pairs)
                )
            except InsufficientEvidence:
                verdicts.append(Verdict(
                    opconfig.name, app, Classification.INDETERMINATE,
                    evidence=tuple(evidence),
                ))
        return OperatorResult(
            operator=opconfig.name,
            roaming=roaming,
            verdicts=tuple(verdicts),
            aborted=aborted,
            abort_reason=abort_reason,
        )

    def _run_phase(
        self,
        state: _OperatorState,
        cells: list[Cell],
        session_kind: SessionKind,
        cell_results: dict[Cell, bool | None],
    ) -> None:
        ordered = sorted(cells, key=lambda c: cell_sort_key(self.config, c))
        step = self.config.max_cells_per_session
        for start in range(0, len(ordered), step):
            chunk = ordered[start:start + step]
            cell_results.update(self._run_session(state, chunk, session_kind))

    def _run_session(
        self, state: _OperatorState, cells: list[Cell], session_kind: SessionKind
    ) -> dict[Cell, bool | None]:
        """One multiplexed billing-attribution session."""
        config = self.config
        baseline = state.baseline
        plan = plan_session(
            payload_count=len(cells),
            base_unit=config.base_unit,
            granularity=baseline.granularity,
            slack_budget=config.slack_budget,
            remaining_quota=baseline.remaining,
        )
        state.sim.set_session(session_kind)
        failed = False
        try:
            for index, cell in enumerate(cells):
                try:
                    state.engine.run_recipe(self._recipe(state, cell, plan.sizes[index]))
                except ZrAuditError as exc:
                    log.warning("cell %s failed: %s", cell, exc)
                    failed = True
                    break
            try:
                state.engine.generate_control_traffic(
                    plan.control_size, config.control_endpoint
                )
            except ZrAuditError as exc:
                log.warning("control traffic failed: %s", exc)
                failed = True  # settle below will raise ControlNotBilled
        finally:
            state.sim.set_session(SessionKind.DOMESTIC)

        settle = await_settled_quota(
            state.adapter,
            expected_min_delta=max(1, plan.control_size - baseline.granularity),
            baseline=baseline,
            timeout=config.settle_timeout,
        )
        snapshot = self._stable_snapshot(state, settle.snapshot)
        state.baseline = snapshot
        if not settle.settled:
            raise CodecError(
                f"control traffic never became visible within "
                f"{config.settle_timeout}s (ControlNotBilled)"
            )
        if failed:
            return {cell: None for cell in cells}
        bitmask = decode_billing(plan, baseline, snapshot)
        return {cell: bitmask.flags[i] for i, cell in enumerate(cells)}

    def _stable_snapshot(self, state: _OperatorState, snapshot):
        """Poll until the reading stops moving (late billing events)."""
        stable_reads = 0
        while stable_reads < 2:
            state.adapter.wait_until_pollable()
            current = state.adapter.fetch()
            if current.remaining == snapshot.remaining:
                stable_reads += 1
            else:
                stable_reads = 0
                snapshot = current
        return snapshot

    def _recipe(self, state: _OperatorState, cell: Cell, size: int) -> TrafficRecipe:
        endpoint = self.config.endpoints[cell.application]
        if cell.experiment is Experiment.VERIFY:
            presented = endpoint.hostname
            override = None
        elif cell.experiment is Experiment.IP_PROBE:
            presented = self.config.dummy_hostname
            override = None
        else:
            presented = endpoint.hostname
            override = self.desk.forwarder_address(cell.application, cell.ip_version)
        return TrafficRecipe(
            experiment=cell.experiment,
            endpoint=endpoint,
            protocol=cell.protocol,
            ip_version=cell.ip_version,
            target_bytes=size,
            presented_hostname=presented,
            destination_override=override,
        )

    def _run_roaming(
        self, state: _OperatorState, cell_results: dict[Cell, bool | None]
    ) -> str:
        profile = state.opconfig.profile
        if profile.roaming is RoamingMode.NOT_OFFERED:
            return ROAMING_NOT_OFFERED
        candidates = [
            cell for cell, billed in sorted(
                cell_results.items(), key=lambda i: cell_sort_key(self.config, i[0])
            )
            if cell.experiment is Experiment.VERIFY and billed is False
        ]
        if not candidates:
            return ROAMING_INDETERMINATE  # nothing zero-rated domestically
        candidate = candidates[0]
        if self.config.roaming_dwell > 0:
            time.sleep(self.config.roaming_dwell)
        outcome = self._run_session(state, [candidate], SessionKind.ROAMING)
        billed = outcome[candidate]
        if billed is None:
            return ROAMING_INDETERMINATE
        return ROAMING_NO if billed else ROAMING_YES


def run_campaign(config: CampaignConfig, desk: DeskEnvironment) -> CampaignReport:
    return CampaignRunner(config, desk).run()
