"""Gateway routing and byte-exact transport wrappers.

A route dials (destination address, port) either directly or through the
simulated operator gateway.  The gateway speaks a small dialing preamble
(documented in docs/gateway-protocol.md): a 2-byte big-endian length
followed by a JSON header naming transport and destination, then raw stream
bytes (TCP) or raw datagrams (UDP, after a one-datagram acknowledgment).
The preamble is excluded from byte accounting on both sides.
"""

from __future__ import annotations

import json
import socket
import ssl
import struct

from . import ZrAuditError

GATEWAY_HEADER_VERSION = 1
GATEWAY_UDP_ACK = b"\x00ZRGW-OK"
MAX_HEADER_LEN = 1024
RECV_CHUNK = 65536


class RouteError(ZrAuditError):
    pass


class ConnectFailed(RouteError):
    pass


def encode_gateway_header(transport: str, dest_ip: str, dest_port: int) -> bytes:
    if transport not in ("tcp", "udp"):
        raise RouteError(f"bad transport {transport!r}")
    body = json.dumps(
        {
            "version": GATEWAY_HEADER_VERSION,
            "transport": transport,
            "dest_ip": dest_ip,
            "dest_port": int(dest_port),
        },
        sort_keys=True,
    ).encode("utf-8")
    return struct.pack(">H", len(body)) + body


def decode_gateway_header(data: bytes) -> tuple[dict, int]:
    """Returns (header dict, bytes consumed); raises on malformed input."""
    if len(data) < 2:
        raise RouteError("gateway header truncated")
    length = struct.unpack(">H", data[:2])[0]
    if length > MAX_HEADER_LEN:
        raise RouteError("gateway header too long")
    if len(data) < 2 + length:
        raise RouteError("gateway header truncated")
    header = json.loads(data[2 : 2 + length].decode("utf-8"))
    if header.get("version") != GATEWAY_HEADER_VERSION:
        raise RouteError(f"unsupported gateway header version: {header.get('version')}")
    if header.get("transport") not in ("tcp", "udp"):
        raise RouteError("gateway header missing transport")
    return header, 2 + length


class CountingStream:
    """Socket wrapper counting bytes in both directions."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self.bytes_sent = 0
        self.bytes_received = 0

    def sendall(self, data: bytes) -> None:
        self._sock.sendall(data)
        self.bytes_sent += len(data)

    def recv(self, n: int = RECV_CHUNK) -> bytes:
        data = self._sock.recv(n)
        self.bytes_received += len(data)
        return data

    def settimeout(self, timeout) -> None:
        self._sock.settimeout(timeout)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class TlsStream:
    """TLS over a CountingStream via memory BIOs, so wire bytes stay exact."""

    def __init__(self, stream: CountingStream, context: ssl.SSLContext, server_hostname: str):
        self._stream = stream
        self._incoming = ssl.MemoryBIO()
        self._outgoing = ssl.MemoryBIO()
        self._tls = context.wrap_bio(
            self._incoming, self._outgoing, server_hostname=server_hostname
        )

    @property
    def bytes_sent(self) -> int:
        return self._stream.bytes_sent

    @property
    def bytes_received(self) -> int:
        return self._stream.bytes_received

    def _pump(self) -> None:
        data = self._outgoing.read()
        if data:
            self._stream.sendall(data)

    def _feed(self) -> None:
        data = self._stream.recv()
        if not data:
            self._incoming.write_eof()
        else:
            self._incoming.write(data)

    def handshake(self) -> None:
        while True:
            try:
                self._tls.do_handshake()
                self._pump()
                return
            except ssl.SSLWantReadError:
                self._pump()
                self._feed()
            except ssl.SSLWantWriteError:
                self._pump()

    def sendall(self, data: bytes) -> None:
        self._tls.write(data)
        self._pump()

    def recv(self, n: int = RECV_CHUNK) -> bytes:
        while True:
            try:
                return self._tls.read(n)
            except ssl.SSLWantReadError:
                self._feed()
            except (ssl.SSLEOFError, ssl.SSLZeroReturnError):
                return b""

    def settimeout(self, timeout) -> None:
        self._stream.settimeout(timeout)

    def close(self) -> None:
        self._stream.close()


class DatagramChannel:
    """Connected UDP channel with byte accounting."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, data: bytes) -> None:
        self._sock.send(data)
        self.bytes_sent += len(data)

    def recv(self, timeout: float | None = None) -> bytes | None:
        self._sock.settimeout(timeout)
        try:
            data = self._sock.recv(65535)
        except (socket.timeout, ConnectionRefusedError, OSError):
            return None
        self.bytes_received += len(data)
        return data

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def _family(address: str) -> int:
    return socket.AF_INET6 if ":" in address else socket.AF_INET


class DirectRoute:
    """Dials destinations literally; used without a simulated operator."""

    name = "direct"

    def open_stream(self, dest_ip: str, dest_port: int, timeout: float = 10.0) -> CountingStream:
        try:
            sock = socket.create_connection((dest_ip, dest_port), timeout=timeout)
        except OSError as exc:
            raise ConnectFailed(f"connect {dest_ip}:{dest_port}: {exc}") from exc
        return CountingStream(sock)

    def open_datagram(self, dest_ip: str, dest_port: int, timeout: float = 10.0) -> DatagramChannel:
        sock = socket.socket(_family(dest_ip), socket.SOCK_DGRAM)
        try:
            sock.connect((dest_ip, dest_port))
        except OSError as exc:
            sock.close()
            raise ConnectFailed(f"udp connect {dest_ip}:{dest_port}: {exc}") from exc
        return DatagramChannel(sock)


class GatewayRoute:
    """Dials through the simulated operator's transparent L4 gateway."""

    name = "gateway"

    def __init__(self, host: str, tcp_port: int, udp_port: int):
        self.host = host
        self.tcp_port = tcp_port
        self.udp_port = udp_port

    def open_stream(self, dest_ip: str, dest_port: int, timeout: float = 10.0) -> CountingStream:
        try:
            sock = socket.create_connection((self.host, self.tcp_port), timeout=timeout)
            sock.sendall(encode_gateway_header("tcp", dest_ip, dest_port))
        except OSError as exc:
            raise ConnectFailed(
                f"gateway {self.host}:{self.tcp_port} -> {dest_ip}:{dest_port}: {exc}"
            ) from exc
        return CountingStream(sock)

    def open_datagram(self, dest_ip: str, dest_port: int, timeout: float = 10.0) -> DatagramChannel:
        sock = socket.socket(_family(self.host), socket.SOCK_DGRAM)
        try:
            sock.connect((self.host, self.udp_port))
            sock.settimeout(timeout)
            sock.send(encode_gateway_header("udp", dest_ip, dest_port))
            ack = sock.recv(64)
        except OSError as exc:
            sock.close()
            raise ConnectFailed(
                f"gateway udp {self.host}:{self.udp_port} -> {dest_ip}:{dest_port}: {exc}"
            ) from exc
        if ack != GATEWAY_UDP_ACK:
            sock.close()
            raise ConnectFailed("gateway did not acknowledge the UDP association")
        return DatagramChannel(sock)
