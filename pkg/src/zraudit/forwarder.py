"""L4 relay used by the host-probe experiment.

Forwards configured TCP and UDP ports to an origin so traffic carries the
real hostname but a third-party destination address.  TCP is a byte-stream
splice; UDP keeps a NAT-style per-peer mapping table (idle expiry,
5 minutes by default) so return datagrams reach the correct client.  The
relay never rewrites, pads or reorders stream bytes and never merges or
splits datagrams.

Runnable standalone::

    python -m zraudit.forwarder --listen 127.0.0.1 \
        --map tcp:0:127.0.0.1:8080 --map udp:0:127.0.0.1:8443

It prints one JSON line describing the bound ports, then relays until
terminated.  Provisioners wrap this invocation: ``local-process`` spawns it
as a child process; ``remote-command`` runs a user-supplied command (e.g.
ssh to a rented host) expected to emit the same JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import shlex
import signal
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field, replace

from . import ZrAuditError

log = logging.getLogger(__name__)

DEFAULT_UDP_EXPIRY = 300.0
RELAY_CHUNK = 65536


class ProvisionFailed(ZrAuditError):
    pass


@dataclass(frozen=True)
class PortMap:
    transport: str  # "tcp" | "udp"
    listen_port: int  # 0 = ephemeral
    origin_host: str
    origin_port: int

    def __post_init__(self):
        if self.transport not in ("tcp", "udp"):
            raise ValueError(f"unknown transport {self.transport!r}")

    def to_dict(self) -> dict:
        return {
            "transport": self.transport,
            "listen_port": self.listen_port,
            "origin_host": self.origin_host,
            "origin_port": self.origin_port,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PortMap":
        return cls(d["transport"], int(d["listen_port"]), d["origin_host"],
                   int(d["origin_port"]))

    @classmethod
    def parse(cls, text: str) -> "PortMap":
        """transport:listen_port:origin_host:origin_port (host may hold ':' last-2 split)."""
        transport, listen_port, rest = text.split(":", 2)
        origin_host, origin_port = rest.rsplit(":", 1)
        return cls(transport, int(listen_port), origin_host, int(origin_port))


@dataclass(frozen=True)
class ForwarderSpec:
    listen_address: str = "127.0.0.1"
    port_maps: tuple[PortMap, ...] = ()
    lifetime: float | None = None
    udp_expiry: float = DEFAULT_UDP_EXPIRY

    def __post_init__(self):
        if not self.port_maps:
            raise ValueError("at least one port map required")


class Forwarder:
    """In-process relay; one listener thread per port map."""

    def __init__(self, spec: ForwarderSpec):
        self.spec = spec
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._sockets: list[socket.socket] = []
        self._bound: list[PortMap] = []
        self._udp_maps: list[dict] = []
        self._lock = threading.Lock()
        self._started_at: float | None = None

    @property
    def address(self) -> str:
        return self.spec.listen_address

    @property
    def bound_maps(self) -> list[PortMap]:
        """Port maps with ephemeral listen ports resolved."""
        return list(self._bound)

    def port_for(self, transport: str, origin_port: int | None = None) -> int:
        for pm in self._bound:
            if pm.transport == transport and (
                origin_port is None or pm.origin_port == origin_port
            ):
                return pm.listen_port
        raise KeyError(f"no {transport} map" + (f" to :{origin_port}" if origin_port else ""))

    def start(self) -> None:
        try:
            for pm in self.spec.port_maps:
                if pm.transport == "tcp":
                    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                    sock.bind((self.spec.listen_address, pm.listen_port))
                    sock.listen(128)
                    sock.settimeout(0.2)
                    target = self._tcp_listener
                else:
                    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
                    sock.bind((self.spec.listen_address, pm.listen_port))
                    sock.settimeout(0.2)
                    target = self._udp_listener
                bound = replace(pm, listen_port=sock.getsockname()[1])
                self._sockets.append(sock)
                self._bound.append(bound)
                thread = threading.Thread(target=target, args=(sock, bound), daemon=True)
                thread.start()
                self._threads.append(thread)
        except OSError as exc:
            self.stop()
            raise ProvisionFailed(f"cannot bind relay ports: {exc}") from exc
        self._started_at = time.monotonic()
        if self.spec.lifetime is not None:
            threading.Thread(target=self._lifetime_watch, daemon=True).start()

    def stop(self) -> None:
        """Idempotent; interrupts all relay tasks within one second."""
        self._stop.set()
        for sock in self._sockets:
            try:
                sock.close()
            except OSError:
                pass
        with self._lock:
            mappings = [m for table in self._udp_maps for m in table.values()]
            for table in self._udp_maps:
                table.clear()
        for mapping in mappings:
            try:
                mapping["upstream"].close()
            except OSError:
                pass
        for thread in self._threads:
            thread.join(timeout=1.0)
        self._threads.clear()

    def _lifetime_watch(self) -> None:
        if not self._stop.wait(self.spec.lifetime):
            log.info("forwarder lifetime expired, tearing down")
            self.stop()

    # --- TCP -----------------------------------------------------------------

    def _tcp_listener(self, listener: socket.socket, pm: PortMap) -> None:
        while not self._stop.is_set():
            try:
                conn, peer = listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(
                target=self._tcp_splice, args=(conn, peer, pm), daemon=True
            ).start()

    def _tcp_splice(self, conn: socket.socket, peer, pm: PortMap) -> None:
        try:
            upstream = socket.create_connection(
                (pm.origin_host, pm.origin_port), timeout=10.0
            )
        except OSError as exc:
            log.warning("relay %s: upstream dial failed: %s", pm, exc)
            conn.close()
            return
        one_way = threading.Thread(
            target=self._pump, args=(conn, upstream), daemon=True
        )
        one_way.start()
        self._pump(upstream, conn)
        one_way.join()
        for sock in (conn, upstream):
            try:
                sock.close()
            except OSError:
                pass

    @staticmethod
    def _pump(src: socket.socket, dst: socket.socket) -> None:
        src.settimeout(None)
        while True:
            try:
                chunk = src.recv(RELAY_CHUNK)
            except OSError:
                chunk = b""
            if not chunk:
                try:
                    dst.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                return
            try:
                dst.sendall(chunk)
            except OSError:
                return

    # --- UDP -----------------------------------------------------------------

    def _udp_listener(self, listener: socket.socket, pm: PortMap) -> None:
        table: dict = {}
        with self._lock:
            self._udp_maps.append(table)
        last_sweep = time.monotonic()
        while not self._stop.is_set():
            now = time.monotonic()
            if now - last_sweep > 1.0:
                self._sweep(table, now)
                last_sweep = now
            try:
                datagram, peer = listener.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            mapping = table.get(peer)
            if mapping is None:
                upstream = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
                try:
                    upstream.connect((pm.origin_host, pm.origin_port))
                except OSError as exc:
                    log.warning("relay %s: udp upstream dial failed: %s", pm, exc)
                    upstream.close()
                    continue
                mapping = {"upstream": upstream, "last_seen": now}
                table[peer] = mapping
                threading.Thread(
                    target=self._udp_return,
                    args=(listener, peer, mapping),
                    daemon=True,
                ).start()
            mapping["last_seen"] = now
            try:
                mapping["upstream"].send(datagram)
            except OSError:
                pass

    def _udp_return(self, listener: socket.socket, peer, mapping: dict) -> None:
        upstream = mapping["upstream"]
        upstream.settimeout(0.2)
        while not self._stop.is_set():
            try:
                datagram = upstream.recv(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            mapping["last_seen"] = time.monotonic()
            try:
                listener.sendto(datagram, peer)
            except OSError:
                return

    def _sweep(self, table: dict, now: float) -> None:
        expired = [
            peer for peer, m in table.items()
            if now - m["last_seen"] > self.spec.udp_expiry
        ]
        for peer in expired:
            mapping = table.pop(peer)
            try:
                mapping["upstream"].close()
            except OSError:
                pass


# --- provisioning ------------------------------------------------------------


class ForwarderHandle:
    """Reachable relay address plus an idempotent teardown."""

    def __init__(self, address: str, bound_maps: list[PortMap], teardown):
        self.address = address
        self.bound_maps = bound_maps
        self._teardown = teardown
        self._torn_down = False
        self._lock = threading.Lock()

    def port_for(self, transport: str, origin_port: int | None = None) -> int:
        for pm in self.bound_maps:
            if pm.transport == transport and (
                origin_port is None or pm.origin_port == origin_port
            ):
                return pm.listen_port
        raise KeyError(f"no {transport} map")

    def teardown(self) -> None:
        with self._lock:
            if self._torn_down:
                return
            self._torn_down = True
        self._teardown()


def provision(
    spec: ForwarderSpec,
    provider: str = "local-process",
    remote_command: str | None = None,
    remote_teardown: str | None = None,
) -> ForwarderHandle:
    """Launch a relay via the given provisioner and return its handle.

    local-process: child ``python -m zraudit.forwarder``.
    remote-command: runs ``remote_command`` (a shell command, e.g. ssh to a
    rented host, that starts the relay and prints its JSON port line).
    """
    if provider == "local-process":
        argv = [sys.executable, "-m", "zraudit.forwarder",
                "--listen", spec.listen_address]
        for pm in spec.port_maps:
            argv += ["--map", f"{pm.transport}:{pm.listen_port}:"
                              f"{pm.origin_host}:{pm.origin_port}"]
        if spec.lifetime is not None:
            argv += ["--lifetime", str(spec.lifetime)]
        argv += ["--udp-expiry", str(spec.udp_expiry)]
        try:
            proc = subprocess.Popen(argv, stdout=subprocess.PIPE, text=True)
        except OSError as exc:
            raise ProvisionFailed(f"cannot spawn relay process: {exc}") from exc
        line = proc.stdout.readline()
        if not line:
            proc.wait(timeout=2.0)
            raise ProvisionFailed(f"relay process exited with {proc.returncode}")
        info = json.loads(line)

        def teardown():
            proc.terminate()
            try:
                proc.wait(timeout=1.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait(timeout=1.0)

    elif provider == "remote-command":
        if not remote_command:
            raise ProvisionFailed("remote-command provider needs remote_command")
        try:
            proc = subprocess.Popen(
                shlex.split(remote_command), stdout=subprocess.PIPE, text=True
            )
        except OSError as exc:
            raise ProvisionFailed(f"cannot run remote command: {exc}") from exc
        line = proc.stdout.readline()
        if not line:
            proc.wait(timeout=5.0)
            raise ProvisionFailed(f"remote command exited with {proc.returncode}")
        info = json.loads(line)

        def teardown():
            if remote_teardown:
                subprocess.run(shlex.split(remote_teardown), timeout=30.0, check=False)
            proc.terminate()
            try:
                proc.wait(timeout=1.0)
            except subprocess.TimeoutExpired:
                proc.kill()

    else:
        raise ProvisionFailed(f"unknown provisioner {provider!r}")

    bound = [PortMap.from_dict(d) for d in info["maps"]]
    return ForwarderHandle(info["listen_address"], bound, teardown)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="zraudit.forwarder", description="L4 TCP/UDP relay"
    )
    parser.add_argument("--listen", default="127.0.0.1")
    parser.add_argument("--map", dest="maps", action="append", required=True,
                        metavar="TRANSPORT:LISTEN_PORT:ORIGIN_HOST:ORIGIN_PORT")
    parser.add_argument("--lifetime", type=float, default=None)
    parser.add_argument("--udp-expiry", type=float, default=DEFAULT_UDP_EXPIRY)
    args = parser.parse_args(argv)

    spec = ForwarderSpec(
        listen_address=args.listen,
        port_maps=tuple(PortMap.parse(m) for m in args.maps),
        lifetime=args.lifetime,
        udp_expiry=args.udp_expiry,
    )
    relay = Forwarder(spec)
    relay.start()
    print(json.dumps({
        "listen_address": relay.address,
        "maps": [pm.to_dict() for pm in relay.bound_maps],
    }), flush=True)

    stop = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stop.set())
    while not stop.is_set():
        stop.wait(0.5)
        if args.lifetime is not None and relay._started_at is not None:
            if time.monotonic() - relay._started_at > args.lifetime:
                break
    relay.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
