"""Hand-rolled TLS ClientHello construction and SNI/Host extraction.

The parsers are deliberately strict: any length inconsistency yields None
instead of a guessed name, so random payloads can never produce a spurious
hostname.
"""

from __future__ import annotations

import os

TLS_HANDSHAKE_RECORD = 0x16
TLS_CLIENT_HELLO = 0x01
EXT_SERVER_NAME = 0x0000
EXT_ALPN = 0x0010
EXT_SUPPORTED_GROUPS = 0x000A
EXT_SIGNATURE_ALGORITHMS = 0x000D
EXT_SUPPORTED_VERSIONS = 0x002B
EXT_KEY_SHARE = 0x0033
EXT_QUIC_TRANSPORT_PARAMS = 0x0039

MAX_HOSTNAME_LEN = 255


def _ext(ext_type: int, body: bytes) -> bytes:
    return ext_type.to_bytes(2, "big") + len(body).to_bytes(2, "big") + body


def build_client_hello(
    server_name: str,
    alpn: tuple[str, ...] = ("h3",),
    quic_transport_params: bytes | None = None,
) -> bytes:
    """TLS 1.3 ClientHello handshake message (no record layer)."""
    name = server_name.encode("ascii")
    entry = b"\x00" + len(name).to_bytes(2, "big") + name
    extensions = [_ext(EXT_SERVER_NAME, len(entry).to_bytes(2, "big") + entry)]

    groups = b"\x00\x1d\x00\x17\x00\x18"  # x25519, secp256r1, secp384r1
    extensions.append(_ext(EXT_SUPPORTED_GROUPS, len(groups).to_bytes(2, "big") + groups))

    protos = b"".join(bytes([len(p)]) + p.encode("ascii") for p in alpn)
    extensions.append(_ext(EXT_ALPN, len(protos).to_bytes(2, "big") + protos))

    sig_algs = b"\x04\x03\x08\x04\x04\x01\x05\x03\x08\x05\x05\x01\x08\x06\x06\x01"
    extensions.append(
        _ext(EXT_SIGNATURE_ALGORITHMS, len(sig_algs).to_bytes(2, "big") + sig_algs)
    )

    extensions.append(_ext(EXT_SUPPORTED_VERSIONS, b"\x02\x03\x04"))  # TLS 1.3

    key_exchange = os.urandom(32)
    share = b"\x00\x1d" + len(key_exchange).to_bytes(2, "big") + key_exchange
    extensions.append(_ext(EXT_KEY_SHARE, len(share).to_bytes(2, "big") + share))

    if quic_transport_params is not None:
        extensions.append(_ext(EXT_QUIC_TRANSPORT_PARAMS, quic_transport_params))

    ext_bytes = b"".join(extensions)
    body = (
        b"\x03\x03"  # legacy_version TLS 1.2
        + os.urandom(32)
        + b"\x00"  # empty legacy_session_id
        + b"\x00\x04\x13\x01\x13\x02"  # TLS_AES_128_GCM_SHA256, TLS_AES_256_GCM_SHA384
        + b"\x01\x00"  # null compression
        + len(ext_bytes).to_bytes(2, "big")
        + ext_bytes
    )
    return b"\x01" + len(body).to_bytes(3, "big") + body


def parse_client_hello_sni(handshake: bytes) -> str | None:
    """Extract the SNI host_name from a raw ClientHello handshake message."""
    data = handshake
    if len(data) < 4 or data[0] != TLS_CLIENT_HELLO:
        return None
    body_len = int.from_bytes(data[1:4], "big")
    if len(data) < 4 + body_len:
        return None
    data = data[4 : 4 + body_len]
    pos = 2 + 32  # legacy_version + random
    if pos + 1 > len(data):
        return None
    pos += 1 + data[pos]  # legacy_session_id
    if pos + 2 > len(data):
        return None
    pos += 2 + int.from_bytes(data[pos : pos + 2], "big")  # cipher_suites
    if pos + 1 > len(data):
        return None
    pos += 1 + data[pos]  # compression_methods
    if pos + 2 > len(data):
        return None
    ext_total = int.from_bytes(data[pos : pos + 2], "big")
    pos += 2
    if pos + ext_total > len(data):
        return None
    end = pos + ext_total
    while pos + 4 <= end:
        ext_type = int.from_bytes(data[pos : pos + 2], "big")
        ext_len = int.from_bytes(data[pos + 2 : pos + 4], "big")
        pos += 4
        if pos + ext_len > end:
            return None
        if ext_type == EXT_SERVER_NAME:
            return _parse_server_name_list(data[pos : pos + ext_len])
        pos += ext_len
    return None


def _parse_server_name_list(body: bytes) -> str | None:
    if len(body) < 2:
        return None
    list_len = int.from_bytes(body[0:2], "big")
    if 2 + list_len > len(body):
        return None
    pos = 2
    end = 2 + list_len
    while pos + 3 <= end:
        name_type = body[pos]
        name_len = int.from_bytes(body[pos + 1 : pos + 3], "big")
        pos += 3
        if pos + name_len > end:
            return None
        if name_type == 0:  # host_name
            if name_len == 0 or name_len > MAX_HOSTNAME_LEN:
                return None
            try:
                return body[pos : pos + name_len].decode("ascii")
            except UnicodeDecodeError:
                return None
        pos += name_len
    return None


def extract_sni_from_tls_records(data: bytes) -> str | None:
    """Extract SNI from the start of a TCP stream carrying TLS records.

    Reassembles consecutive handshake records in case the ClientHello spans
    more than one record.
    """
    handshake = bytearray()
    pos = 0
    while pos + 5 <= len(data):
        if data[pos] != TLS_HANDSHAKE_RECORD:
            break
        major = data[pos + 1]
        if major != 3:
            return None
        rec_len = int.from_bytes(data[pos + 3 : pos + 5], "big")
        if rec_len == 0 or pos + 5 + rec_len > len(data):
            break
        handshake += data[pos + 5 : pos + 5 + rec_len]
        pos += 5 + rec_len
        if len(handshake) >= 4:
            msg_len = int.from_bytes(handshake[1:4], "big")
            if len(handshake) >= 4 + msg_len:
                break
    if not handshake:
        return None
    return parse_client_hello_sni(bytes(handshake))


def extract_http_host(data: bytes) -> str | None:
    """Host header of the first plaintext HTTP/1.x request in ``data``."""
    head_end = data.find(b"\r\n\r\n")
    head = data[: head_end if head_end != -1 else len(data)]
    lines = head.split(b"\r\n")
    if not lines:
        return None
    request_line = lines[0].split(b" ")
    if len(request_line) != 3 or not request_line[2].startswith(b"HTTP/"):
        return None
    for line in lines[1:]:
        if b":" not in line:
            continue
        key, _, value = line.partition(b":")
        if key.strip().lower() == b"host":
            host = value.strip()
            if not host or len(host) > MAX_HOSTNAME_LEN:
                return None
            # strip an explicit port, but leave IPv6 literals intact
            if host.count(b":") == 1:
                host = host.split(b":")[0]
            try:
                return host.decode("ascii")
            except UnicodeDecodeError:
                return None
    return None
