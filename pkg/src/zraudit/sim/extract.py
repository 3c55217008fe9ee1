"""Hostname extraction from the first bytes of a flow.

HTTP: Host header of the first request.  HTTPS: SNI from the TLS
ClientHello.  HTTP3: SNI from the ClientHello inside the QUIC v1 Initial
packet, after deriving the initial keys from the destination connection ID.
Any parse failure yields None; hostname rules then cannot match.
"""

from __future__ import annotations

from ..endpoints import Protocol
from ..quicwire import QuicError, parse_initial, reassemble_crypto
from ..tlswire import extract_http_host, extract_sni_from_tls_records, parse_client_hello_sni
from .rules import FlowClass

# middlebox realism: only the first 8 KiB of a flow are inspected
INSPECTION_LIMIT = 8192


def extract_hostname(flow_class: FlowClass, data: bytes) -> str | None:
    data = data[:INSPECTION_LIMIT]
    if flow_class.protocol is Protocol.HTTP:
        return extract_http_host(data)
    if flow_class.protocol is Protocol.HTTPS:
        return extract_sni_from_tls_records(data)
    return extract_quic_initial_sni(data)


def extract_quic_initial_sni(datagram: bytes) -> str | None:
    try:
        packet = parse_initial(datagram, from_client=True)
        crypto = reassemble_crypto(packet.payload)
    except QuicError:
        return None
    return parse_client_hello_sni(crypto)
