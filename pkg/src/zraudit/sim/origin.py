"""Desk-scale origin servers for the three protocols under test.

One :class:`OriginServer` per simulated application: a plaintext HTTP/1.1
listener, a TLS listener serving the same resources, and a UDP listener
speaking the h3mini protocol.  Besides static resources every origin serves
``/bytes/<n>``: exactly n deterministic body bytes, which the traffic engine
uses to hit payload size targets.
"""

from __future__ import annotations

import logging
import re
import socket
import ssl
import threading

from ..certs import CertStore
from ..h3mini import H3MiniResponder

log = logging.getLogger(__name__)

_BYTES_PATH = re.compile(r"/bytes/(\d+)\Z")
_PATTERN = b"0123456789abcdef"
MAX_DYNAMIC_BODY = 1 << 20
MAX_HEAD = 16384
NOT_FOUND_BODY = b"not found\n"


def pattern_bytes(n: int) -> bytes:
    reps = n // len(_PATTERN) + 1
    return (_PATTERN * reps)[:n]


class ResourceSet:
    """Static path->body mapping plus the dynamic /bytes/<n> resource."""

    def __init__(self, static: dict[str, bytes] | None = None,
                 max_dynamic: int = MAX_DYNAMIC_BODY):
        self._static = dict(static or {})
        self._max_dynamic = max_dynamic

    def get(self, path: str, default: bytes | None = None) -> bytes | None:
        body = self._static.get(path)
        if body is not None:
            return body
        match = _BYTES_PATH.fullmatch(path)
        if match and int(match.group(1)) <= self._max_dynamic:
            return pattern_bytes(int(match.group(1)))
        return default


class OriginServer:
    """HTTP + HTTPS + h3mini listeners sharing one resource set."""

    def __init__(
        self,
        resources: ResourceSet,
        cert_store: CertStore | None = None,
        host: str = "127.0.0.1",
        protocols: tuple[str, ...] = ("http", "https", "http3"),
    ):
        if cert_store is None and ("https" in protocols or "http3" in protocols):
            raise ValueError("https/http3 listeners need a cert store")
        self.resources = resources
        self.cert_store = cert_store
        self.host = host
        self.protocols = protocols
        self._sockets: dict[str, socket.socket] = {}
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._tls_context: ssl.SSLContext | None = None

    def port(self, protocol: str) -> int:
        return self._sockets[protocol].getsockname()[1]

    @property
    def http_port(self) -> int:
        return self.port("http")

    @property
    def https_port(self) -> int:
        return self.port("https")

    @property
    def h3_port(self) -> int:
        return self.port("http3")

    def start(self) -> None:
        if "https" in self.protocols:
            self._tls_context = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            self._tls_context.load_cert_chain(
                self.cert_store.cert_path, self.cert_store.key_path
            )
        for protocol in ("http", "https"):
            if protocol not in self.protocols:
                continue
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.bind((self.host, 0))
            sock.listen(64)
            sock.settimeout(0.2)
            self._sockets[protocol] = sock
            thread = threading.Thread(
                target=self._accept_loop, args=(sock, protocol == "https"), daemon=True
            )
            thread.start()
            self._threads.append(thread)
        if "http3" in self.protocols:
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            sock.bind((self.host, 0))
            sock.settimeout(0.2)
            self._sockets["http3"] = sock
            thread = threading.Thread(target=self._h3_loop, args=(sock,), daemon=True)
            thread.start()
            self._threads.append(thread)

    def stop(self) -> None:
        self._stop.set()
        for sock in self._sockets.values():
            try:
                sock.close()
            except OSError:
                pass
        for thread in self._threads:
            thread.join(timeout=1.0)

    # --- HTTP / HTTPS ------------------------------------------------------

    def _accept_loop(self, listener: socket.socket, tls: bool) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(
                target=self._handle_tcp, args=(conn, tls), daemon=True
            ).start()

    def _handle_tcp(self, conn: socket.socket, tls: bool) -> None:
        conn.settimeout(10.0)
        try:
            if tls:
                conn = self._tls_context.wrap_socket(conn, server_side=True)
            buffer = b""
            while not self._stop.is_set():
                head_end = buffer.find(b"\r\n\r\n")
                while head_end < 0 and len(buffer) < MAX_HEAD:
                    chunk = conn.recv(8192)
                    if not chunk:
                        return
                    buffer += chunk
                    head_end = buffer.find(b"\r\n\r\n")
                if head_end < 0:
                    return
                head, buffer = buffer[:head_end], buffer[head_end + 4:]
                keep_alive = self._serve_request(conn, head)
                if not keep_alive:
                    return
        except (OSError, ssl.SSLError):
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _serve_request(self, conn, head: bytes) -> bool:
        lines = head.split(b"\r\n")
        parts = lines[0].split(b" ")
        if len(parts) != 3 or parts[0] != b"GET":
            conn.sendall(b"HTTP/1.1 400 Bad Request\r\nContent-Length: 0\r\n\r\n")
            return False
        path = parts[1].decode("latin-1")
        close = any(line.lower() == b"connection: close" for line in lines[1:])
        body = self.resources.get(path)
        status = b"200 OK" if body is not None else b"404 Not Found"
        if body is None:
            body = NOT_FOUND_BODY
        conn.sendall(
            b"HTTP/1.1 " + status + b"\r\n"
            b"Content-Length: " + str(len(body)).encode() + b"\r\n"
            b"Connection: " + (b"close" if close else b"keep-alive") + b"\r\n\r\n"
            + body
        )
        return not close

    # --- h3mini -------------------------------------------------------------

    def _h3_loop(self, sock: socket.socket) -> None:
        responder = H3MiniResponder(self.resources, self.cert_store.leaf_der)
        while not self._stop.is_set():
            try:
                datagram, peer = sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            replies, _ = responder.handle(peer, datagram)
            for reply in replies:
                try:
                    sock.sendto(reply, peer)
                except OSError:
                    break
