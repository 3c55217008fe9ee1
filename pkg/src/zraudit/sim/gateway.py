"""Transparent metering gateway of the simulated operator.

Clients dial through it using the length-prefixed JSON preamble from
``zraudit.routes``; the gateway dials the mapped real address, relays bytes
unmodified, inspects the first bytes of each flow for a hostname and
attributes every relayed byte to quota or a zero-rating pool.

Destination addresses live in a simulated address space: the network map
translates (destination IP, port, transport) to a real dialable address, so
IPv6 classification rules can be exercised without IPv6 loopback plumbing.
"""

from __future__ import annotations

import ipaddress
import logging
import socket
import struct
import threading
import time

from ..endpoints import IpVersion, Protocol
from ..routes import GATEWAY_UDP_ACK, RouteError, decode_gateway_header
from .extract import INSPECTION_LIMIT, extract_hostname
from .metering import Meter
from .rules import FlowClass, SessionKind, matching_rule

log = logging.getLogger(__name__)

RELAY_CHUNK = 65536


class NetworkMap:
    """(sim destination ip, port, transport) -> (real host, real port)."""

    def __init__(self):
        self._routes: dict[tuple[str, int, str], tuple[str, int]] = {}

    @staticmethod
    def _key(ip: str, port: int, transport: str) -> tuple[str, int, str]:
        return (str(ipaddress.ip_address(ip)), int(port), transport)

    def add(self, sim_ip: str, port: int, transport: str, real_host: str, real_port: int):
        self._routes[self._key(sim_ip, port, transport)] = (real_host, int(real_port))

    def lookup(self, sim_ip: str, port: int, transport: str) -> tuple[str, int] | None:
        try:
            return self._routes.get(self._key(sim_ip, port, transport))
        except ValueError:
            return None

    def to_dict(self) -> dict:
        return {
            f"{transport}:{ip}:{port}": f"{host}:{rport}"
            for (ip, port, transport), (host, rport) in sorted(self._routes.items())
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkMap":
        net = cls()
        for key, value in d.items():
            transport, ip, port = key.split(":", 1)[0], *key.split(":", 1)[1].rsplit(":", 1)
            host, rport = value.rsplit(":", 1)
            net.add(ip, int(port), transport, host, int(rport))
        return net


def flow_class_for(transport: str, dest_ip: str, dest_port: int) -> FlowClass | None:
    version = IpVersion.V6 if ":" in dest_ip else IpVersion.V4
    if transport == "tcp" and dest_port == 80:
        return FlowClass(Protocol.HTTP, version)
    if transport == "tcp" and dest_port == 443:
        return FlowClass(Protocol.HTTPS, version)
    if transport == "udp" and dest_port == 443:
        return FlowClass(Protocol.HTTP3, version)
    return None


class GatewayServer:
    """One gateway per operator profile; meter swappable via the control API."""

    def __init__(self, meter: Meter, network_map: NetworkMap, host: str = "127.0.0.1"):
        self.meter = meter
        self.network_map = network_map
        self.host = host
        self.session_kind = SessionKind.DOMESTIC
        self._tcp_sock: socket.socket | None = None
        self._udp_sock: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._udp_assocs: dict = {}
        self._lock = threading.Lock()

    @property
    def tcp_port(self) -> int:
        return self._tcp_sock.getsockname()[1]

    @property
    def udp_port(self) -> int:
        return self._udp_sock.getsockname()[1]

    def start(self) -> None:
        self._tcp_sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._tcp_sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._tcp_sock.bind((self.host, 0))
        self._tcp_sock.listen(64)
        self._udp_sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._udp_sock.bind((self.host, 0))
        self._udp_sock.settimeout(0.2)
        for target in (self._accept_loop, self._udp_loop):
            thread = threading.Thread(target=target, daemon=True)
            thread.start()
            self._threads.append(thread)

    def stop(self) -> None:
        self._stop.set()
        for sock in (self._tcp_sock, self._udp_sock):
            if sock is not None:
                try:
                    sock.close()
                except OSError:
                    pass
        with self._lock:
            assocs = list(self._udp_assocs.values())
            self._udp_assocs.clear()
        for assoc in assocs:
            try:
                assoc["upstream"].close()
            except OSError:
                pass
        for thread in self._threads:
            thread.join(timeout=1.0)

    # --- TCP -------------------------------------------------------------

    def _accept_loop(self) -> None:
        self._tcp_sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, peer = self._tcp_sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(
                target=self._handle_tcp, args=(conn, peer), daemon=True
            ).start()

    def _read_preamble(self, conn: socket.socket) -> dict | None:
        data = b""
        conn.settimeout(10.0)
        while True:
            if len(data) >= 2:
                needed = 2 + struct.unpack(">H", data[:2])[0]
                if len(data) >= needed:
                    break
            else:
                needed = 2
            try:
                chunk = conn.recv(needed - len(data))
            except OSError:
                return None
            if not chunk:
                return None
            data += chunk
        try:
            header, _ = decode_gateway_header(data)
        except (RouteError, ValueError):
            return None
        return header

    def _handle_tcp(self, conn: socket.socket, peer) -> None:
        meter = self.meter
        session = self.session_kind
        header = self._read_preamble(conn)
        if header is None or header["transport"] != "tcp":
            conn.close()
            return
        dest_ip, dest_port = header["dest_ip"], header["dest_port"]
        upstream_addr = self.network_map.lookup(dest_ip, dest_port, "tcp")
        if upstream_addr is None:
            conn.close()
            return
        try:
            upstream = socket.create_connection(upstream_addr, timeout=10.0)
        except OSError:
            conn.close()
            return
        record = meter.open_flow("tcp", f"{peer[0]}:{peer[1]}", dest_ip, dest_port, session)
        flow_class = flow_class_for("tcp", dest_ip, dest_port)
        state = {"buffer": bytearray(), "done": False}

        def classify(final: bool) -> None:
            if state["done"]:
                return
            hostname = None
            if flow_class is not None:
                hostname = extract_hostname(flow_class, bytes(state["buffer"]))
            if hostname is None and not final and len(state["buffer"]) < INSPECTION_LIMIT:
                return  # wait for more client bytes
            rule = matching_rule(meter.profile, session, dest_ip, flow_class, hostname) \
                if flow_class is not None else None
            meter.set_classification(
                record,
                flow_class,
                hostname,
                rule.pool if rule else None,
                rule.rule_id if rule else None,
            )
            state["done"] = True

        def pump_client_to_upstream() -> None:
            self._pump(conn, upstream, meter, record, state, classify)

        thread = threading.Thread(target=pump_client_to_upstream, daemon=True)
        thread.start()
        self._pump(upstream, conn, meter, record)
        thread.join()
        classify(final=True)
        meter.close_flow(record)
        for sock in (conn, upstream):
            try:
                sock.close()
            except OSError:
                pass

    def _pump(self, src, dst, meter, record, state=None, classify=None) -> None:
        src.settimeout(None)
        while True:
            try:
                chunk = src.recv(RELAY_CHUNK)
            except OSError:
                chunk = b""
            if not chunk:
                if classify is not None:
                    classify(final=True)
                try:
                    dst.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                return
            meter.add_bytes(record, len(chunk))
            if state is not None and not state["done"]:
                if len(state["buffer"]) < INSPECTION_LIMIT:
                    state["buffer"] += chunk[: INSPECTION_LIMIT - len(state["buffer"])]
                classify(final=False)
            try:
                dst.sendall(chunk)
            except OSError:
                return

    # --- UDP -------------------------------------------------------------

    def _udp_loop(self) -> None:
        while not self._stop.is_set():
            try:
                datagram, peer = self._udp_sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            with self._lock:
                assoc = self._udp_assocs.get(peer)
            if assoc is None:
                self._udp_associate(peer, datagram)
                continue
            assoc["last_seen"] = time.monotonic()
            meter, record = assoc["meter"], assoc["record"]
            meter.add_bytes(record, len(datagram))
            if not record.classified:
                hostname = None
                if assoc["flow_class"] is not None:
                    hostname = extract_hostname(assoc["flow_class"], datagram)
                rule = (
                    matching_rule(
                        meter.profile,
                        assoc["session"],
                        record.dst_ip,
                        assoc["flow_class"],
                        hostname,
                    )
                    if assoc["flow_class"] is not None
                    else None
                )
                meter.set_classification(
                    record,
                    assoc["flow_class"],
                    hostname,
                    rule.pool if rule else None,
                    rule.rule_id if rule else None,
                )
            try:
                assoc["upstream"].send(datagram)
            except OSError:
                pass

    def _udp_associate(self, peer, datagram: bytes) -> None:
        try:
            header, consumed = decode_gateway_header(datagram)
        except (RouteError, ValueError):
            return
        if header["transport"] != "udp" or consumed != len(datagram):
            return
        dest_ip, dest_port = header["dest_ip"], header["dest_port"]
        upstream_addr = self.network_map.lookup(dest_ip, dest_port, "udp")
        if upstream_addr is None:
            return
        upstream = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            upstream.connect(upstream_addr)
        except OSError:
            upstream.close()
            return
        meter = self.meter
        session = self.session_kind
        record = meter.open_flow("udp", f"{peer[0]}:{peer[1]}", dest_ip, dest_port, session)
        assoc = {
            "upstream": upstream,
            "meter": meter,
            "record": record,
            "session": session,
            "flow_class": flow_class_for("udp", dest_ip, dest_port),
            "last_seen": time.monotonic(),
        }
        with self._lock:
            self._udp_assocs[peer] = assoc
        threading.Thread(
            target=self._udp_upstream_loop, args=(peer, assoc), daemon=True
        ).start()
        try:
            self._udp_sock.sendto(GATEWAY_UDP_ACK, peer)
        except OSError:
            pass

    def _udp_upstream_loop(self, peer, assoc) -> None:
        upstream = assoc["upstream"]
        upstream.settimeout(0.5)
        while not self._stop.is_set():
            try:
                datagram = upstream.recv(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            assoc["meter"].add_bytes(assoc["record"], len(datagram))
            try:
                self._udp_sock.sendto(datagram, peer)
            except OSError:
                break
        assoc["meter"].close_flow(assoc["record"])
