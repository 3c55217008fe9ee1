"""Desk-scale HTTP3 stand-in over QUIC v1 Initial packets.

The first flight is a genuine RFC-compliant QUIC v1 Initial carrying a real
TLS 1.3 ClientHello (so any standards-based middlebox can classify it by
SNI).  After that exchange both sides switch to a compact encrypted
request/response protocol keyed off the initial secret.  It is not
interoperable with full HTTP/3 stacks; it exists so hostname-classified UDP
flows can be generated, relayed, metered and billed entirely offline.

Wire format after the Initial exchange (one message per datagram):

    0x40 | seq(8, big-endian) | AESGCM(key_dir, iv_dir XOR seq, message)

message = type byte + body; types: 0x01 request (JSON {host, path}),
0x02 response head (JSON {status, length}), 0x03 body chunk (raw bytes).
"""

from __future__ import annotations

import json
import os
import struct

from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import ZrAuditError
from .certs import verify_leaf
from .quicwire import (
    InitialKeys,
    QuicError,
    build_initial,
    derive_initial_keys,
    encode_varint,
    hkdf_expand_label,
    parse_initial,
    reassemble_crypto,
)
from .tlswire import build_client_hello, parse_client_hello_sni

ALPN = "h3"
ACCEPT_MAGIC = b"ZRH3"
MSG_REQUEST = 0x01
MSG_RESPONSE_HEAD = 0x02
MSG_DATA = 0x03
CHUNK_SIZE = 1200
NOT_FOUND_BODY = b"not found\n"


class H3Error(ZrAuditError):
    pass


class H3HandshakeFailed(H3Error):
    pass


class H3CertificateRejected(H3Error):
    pass


def _transport_params(scid: bytes) -> bytes:
    def param(pid: int, value: bytes) -> bytes:
        return encode_varint(pid) + encode_varint(len(value)) + value

    return b"".join(
        [
            param(0x01, encode_varint(30000)),  # max_idle_timeout
            param(0x04, encode_varint(1 << 20)),  # initial_max_data
            param(0x08, encode_varint(16)),  # initial_max_streams_bidi
            param(0x0F, scid),  # initial_source_connection_id
        ]
    )


def _app_keys(keys: InitialKeys) -> tuple[tuple[bytes, bytes], tuple[bytes, bytes]]:
    """(client->server, server->client) AEAD key/iv pairs."""
    c2s = (
        hkdf_expand_label(keys.secret, b"zr h3 c2s key", 16),
        hkdf_expand_label(keys.secret, b"zr h3 c2s iv", 12),
    )
    s2c = (
        hkdf_expand_label(keys.secret, b"zr h3 s2c key", 16),
        hkdf_expand_label(keys.secret, b"zr h3 s2c iv", 12),
    )
    return c2s, s2c


def _seal(key: bytes, iv: bytes, seq: int, message: bytes) -> bytes:
    header = b"\x40" + struct.pack(">Q", seq)
    nonce = bytes(a ^ b for a, b in zip(iv, seq.to_bytes(12, "big")))
    return header + AESGCM(key).encrypt(nonce, message, header)


def _open(key: bytes, iv: bytes, datagram: bytes) -> tuple[int, bytes]:
    if len(datagram) < 9 or datagram[0] != 0x40:
        raise H3Error("not an application datagram")
    header, ciphertext = datagram[:9], datagram[9:]
    seq = struct.unpack(">Q", header[1:9])[0]
    nonce = bytes(a ^ b for a, b in zip(iv, seq.to_bytes(12, "big")))
    try:
        return seq, AESGCM(key).decrypt(nonce, ciphertext, header)
    except Exception as exc:
        raise H3Error(f"datagram decryption failed: {exc}") from exc


def build_accept(cert_der: bytes, alpn: str = ALPN) -> bytes:
    blob = (
        ACCEPT_MAGIC
        + struct.pack(">H", len(alpn))
        + alpn.encode("ascii")
        + struct.pack(">I", len(cert_der))
        + cert_der
    )
    return blob


def parse_accept(blob: bytes) -> tuple[str, bytes]:
    if blob[:4] != ACCEPT_MAGIC:
        raise H3Error("bad accept blob")
    alpn_len = struct.unpack(">H", blob[4:6])[0]
    alpn = blob[6 : 6 + alpn_len].decode("ascii")
    pos = 6 + alpn_len
    cert_len = struct.unpack(">I", blob[pos : pos + 4])[0]
    cert = blob[pos + 4 : pos + 4 + cert_len]
    if len(cert) != cert_len:
        raise H3Error("truncated accept blob")
    return alpn, cert


class H3MiniClient:
    """Sequential request/response client over a datagram channel."""

    def __init__(
        self,
        channel,
        server_name: str,
        verify_ca: str | None = None,
        handshake_timeout: float = 2.0,
        handshake_retries: int = 3,
        response_timeout: float = 5.0,
        request_retries: int = 3,
    ):
        self._channel = channel
        self.server_name = server_name
        self._verify_ca = verify_ca
        self._handshake_timeout = handshake_timeout
        self._handshake_retries = handshake_retries
        self._response_timeout = response_timeout
        self._request_retries = request_retries
        self._send_seq = 0
        self._keys: InitialKeys | None = None
        self._c2s = self._s2c = None
        self.negotiated_alpn: str | None = None

    def connect(self) -> None:
        dcid, scid = os.urandom(8), os.urandom(8)
        keys = derive_initial_keys(dcid)
        hello = build_client_hello(
            self.server_name, alpn=(ALPN,), quic_transport_params=_transport_params(scid)
        )
        crypto = b"\x06" + encode_varint(0) + encode_varint(len(hello)) + hello
        initial = build_initial(dcid, scid, crypto, packet_number=0, pad_to=1200)

        accept = None
        for _ in range(self._handshake_retries):
            self._channel.send(initial)
            reply = self._channel.recv(self._handshake_timeout)
            if reply is None:
                continue
            try:
                packet = parse_initial(reply, from_client=False, keys=keys)
                accept = reassemble_crypto(packet.payload)
                break
            except QuicError:
                continue
        if accept is None:
            raise H3HandshakeFailed(f"no handshake reply for {self.server_name}")
        alpn, cert_der = parse_accept(accept)
        if alpn != ALPN:
            raise H3HandshakeFailed(f"server negotiated {alpn!r}, wanted {ALPN!r}")
        self.negotiated_alpn = alpn
        if self._verify_ca is not None and not verify_leaf(
            cert_der, self.server_name, self._verify_ca
        ):
            raise H3CertificateRejected(
                f"certificate does not validate for {self.server_name}"
            )
        self._keys = keys
        self._c2s, self._s2c = _app_keys(keys)

    def request(self, host: str, path: str) -> tuple[int, bytes]:
        if self._keys is None:
            raise H3Error("not connected")
        body = json.dumps({"host": host, "path": path}).encode("utf-8")
        message = bytes([MSG_REQUEST]) + body
        last_error = "no response"
        for _ in range(self._request_retries):
            self._send_seq += 1
            self._channel.send(_seal(*self._c2s, self._send_seq, message))
            result = self._collect_response()
            if result is not None:
                return result
            last_error = "response timed out"
        raise H3Error(f"request {path} failed: {last_error}")

    def _collect_response(self) -> tuple[int, bytes] | None:
        status = None
        expected = 0
        chunks: dict[int, bytes] = {}
        head_seq = -1
        while True:
            datagram = self._channel.recv(self._response_timeout)
            if datagram is None:
                return None
            try:
                seq, message = _open(*self._s2c, datagram)
            except H3Error:
                continue
            if not message:
                continue
            if message[0] == MSG_RESPONSE_HEAD:
                head = json.loads(message[1:].decode("utf-8"))
                status, expected, head_seq = int(head["status"]), int(head["length"]), seq
            elif message[0] == MSG_DATA:
                chunks[seq] = message[1:]
            if status is not None:
                body = b"".join(chunks[s] for s in sorted(chunks) if s > head_seq)
                if len(body) >= expected:
                    return status, body[:expected]

    def close(self) -> None:
        self._channel.close()


class H3MiniResponder:
    """Per-datagram server logic; transport loop lives in the origin server."""

    def __init__(self, resources, cert_der: bytes):
        # resources: anything with .get(path) -> bytes | None
        self._resources = resources
        self._cert_der = cert_der
        self._conns: dict = {}  # peer -> (keys, c2s, s2c, send_seq)

    def handle(self, peer, datagram: bytes) -> tuple[list[bytes], str | None]:
        """Returns (datagrams to send back, extracted SNI if handshake)."""
        if datagram and datagram[0] & 0x80:
            return self._handle_initial(peer, datagram)
        state = self._conns.get(peer)
        if state is None:
            return [], None
        keys, c2s, s2c, _ = state
        try:
            _, message = _open(*c2s, datagram)
        except H3Error:
            return [], None
        if not message or message[0] != MSG_REQUEST:
            return [], None
        request = json.loads(message[1:].decode("utf-8"))
        return self._respond(peer, request.get("path", "")), None

    def _handle_initial(self, peer, datagram: bytes) -> tuple[list[bytes], str | None]:
        try:
            packet = parse_initial(datagram, from_client=True)
            hello = reassemble_crypto(packet.payload)
        except QuicError:
            return [], None
        sni = parse_client_hello_sni(hello)
        keys = derive_initial_keys(packet.dcid)
        c2s, s2c = _app_keys(keys)
        self._conns[peer] = [keys, c2s, s2c, 0]
        accept = build_accept(self._cert_der)
        crypto = b"\x06" + encode_varint(0) + encode_varint(len(accept)) + accept
        reply = build_initial(
            dcid=packet.scid,
            scid=os.urandom(8),
            payload=crypto,
            packet_number=0,
            from_client=False,
            keys=keys,
        )
        return [reply], sni

    def _respond(self, peer, path: str) -> list[bytes]:
        state = self._conns[peer]
        _, _, s2c, _ = state
        body = self._resources.get(path)
        status = 200 if body is not None else 404
        if body is None:
            body = NOT_FOUND_BODY
        out = []
        head = json.dumps({"status": status, "length": len(body)}).encode("utf-8")
        state[3] += 1
        out.append(_seal(*s2c, state[3], bytes([MSG_RESPONSE_HEAD]) + head))
        for start in range(0, len(body), CHUNK_SIZE):
            state[3] += 1
            out.append(
                _seal(*s2c, state[3], bytes([MSG_DATA]) + body[start : start + CHUNK_SIZE])
            )
        return out
