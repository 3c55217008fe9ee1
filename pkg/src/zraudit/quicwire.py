"""QUIC version-1 Initial packet construction and decryption.

Initial packets are protected with keys derived from the destination
connection ID alone, so any on-path element can recover the embedded TLS
ClientHello: HKDF over the fixed v1 salt yields the AEAD key/IV and the
header-protection key (AES-128-GCM / AES-ECB, SHA-256).
"""

from __future__ import annotations

from dataclasses import dataclass

from cryptography.hazmat.primitives import hashes, hmac
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDFExpand

from . import ZrAuditError

QUIC_V1 = 0x00000001
INITIAL_SALT_V1 = bytes.fromhex("38762cf7f55934b34d179ae6a4c80cadccbb7f0a")

FRAME_PADDING = 0x00
FRAME_PING = 0x01
FRAME_ACK = 0x02
FRAME_ACK_ECN = 0x03
FRAME_CRYPTO = 0x06
FRAME_CONNECTION_CLOSE = 0x1C

AEAD_TAG_LEN = 16
MIN_CLIENT_INITIAL = 1200


class QuicError(ZrAuditError):
    pass


def encode_varint(value: int) -> bytes:
    if value < 0x40:
        return bytes([value])
    if value < 0x4000:
        return (0x4000 | value).to_bytes(2, "big")
    if value < 0x40000000:
        return (0x80000000 | value).to_bytes(4, "big")
    if value < 0x4000000000000000:
        return (0xC000000000000000 | value).to_bytes(8, "big")
    raise QuicError(f"varint out of range: {value}")


def decode_varint(data: bytes, pos: int) -> tuple[int, int]:
    """Returns (value, new_pos); raises QuicError on truncation."""
    if pos >= len(data):
        raise QuicError("varint truncated")
    length = 1 << (data[pos] >> 6)
    if pos + length > len(data):
        raise QuicError("varint truncated")
    value = int.from_bytes(data[pos : pos + length], "big") & (
        (1 << (8 * length - 2)) - 1
    )
    return value, pos + length


def hkdf_extract(salt: bytes, ikm: bytes) -> bytes:
    ctx = hmac.HMAC(salt, hashes.SHA256())
    ctx.update(ikm)
    return ctx.finalize()


def hkdf_expand_label(secret: bytes, label: bytes, length: int) -> bytes:
    full_label = b"tls13 " + label
    info = (
        length.to_bytes(2, "big")
        + bytes([len(full_label)])
        + full_label
        + b"\x00"  # empty context
    )
    return HKDFExpand(algorithm=hashes.SHA256(), length=length, info=info).derive(secret)


@dataclass(frozen=True)
class DirectionKeys:
    key: bytes
    iv: bytes
    hp: bytes


@dataclass(frozen=True)
class InitialKeys:
    secret: bytes
    client: DirectionKeys
    server: DirectionKeys


def derive_initial_keys(dcid: bytes, version: int = QUIC_V1) -> InitialKeys:
    """Initial secrets for the connection whose first DCID was ``dcid``."""
    if version != QUIC_V1:
        raise QuicError(f"unsupported QUIC version 0x{version:08x}")
    secret = hkdf_extract(INITIAL_SALT_V1, dcid)
    sides = {}
    for side, label in (("client", b"client in"), ("server", b"server in")):
        side_secret = hkdf_expand_label(secret, label, 32)
        sides[side] = DirectionKeys(
            key=hkdf_expand_label(side_secret, b"quic key", 16),
            iv=hkdf_expand_label(side_secret, b"quic iv", 12),
            hp=hkdf_expand_label(side_secret, b"quic hp", 16),
        )
    return InitialKeys(secret=secret, client=sides["client"], server=sides["server"])


def _nonce(iv: bytes, packet_number: int) -> bytes:
    pn = packet_number.to_bytes(len(iv), "big")
    return bytes(a ^ b for a, b in zip(iv, pn))


def _hp_mask(hp_key: bytes, sample: bytes) -> bytes:
    enc = Cipher(algorithms.AES(hp_key), modes.ECB()).encryptor()
    return enc.update(sample) + enc.finalize()


@dataclass(frozen=True)
class InitialPacket:
    version: int
    dcid: bytes
    scid: bytes
    token: bytes
    packet_number: int
    payload: bytes  # decrypted frame bytes
    consumed: int  # length of the packet within the datagram


def build_initial(
    dcid: bytes,
    scid: bytes,
    payload: bytes,
    packet_number: int = 0,
    from_client: bool = True,
    pad_to: int | None = None,
    keys: InitialKeys | None = None,
) -> bytes:
    """Seal ``payload`` (frame bytes) into a protected Initial packet."""
    if keys is None:
        if not from_client:
            # server-side keys derive from the client's original DCID,
            # which the dcid field of a server packet no longer carries
            raise QuicError("server-direction packets need explicit keys")
        keys = derive_initial_keys(dcid)
    direction = keys.client if from_client else keys.server
    pn_len = 4
    pn_bytes = packet_number.to_bytes(pn_len, "big")

    def header_for(payload_len: int) -> bytes:
        length = encode_varint(pn_len + payload_len + AEAD_TAG_LEN)
        return (
            bytes([0xC0 | (pn_len - 1)])
            + QUIC_V1.to_bytes(4, "big")
            + bytes([len(dcid)])
            + dcid
            + bytes([len(scid)])
            + scid
            + encode_varint(0)  # no token
            + length
            + pn_bytes
        )

    if pad_to is not None:
        # grow the payload with PADDING frames until the packet hits pad_to
        while len(header_for(len(payload))) + len(payload) + AEAD_TAG_LEN < pad_to:
            payload += b"\x00"
    header = header_for(len(payload))
    aead = AESGCM(direction.key)
    ciphertext = aead.encrypt(_nonce(direction.iv, packet_number), payload, header)

    sample = ciphertext[4 - pn_len : 4 - pn_len + 16]
    mask = _hp_mask(direction.hp, sample)
    protected = bytearray(header + ciphertext)
    protected[0] ^= mask[0] & 0x0F
    pn_offset = len(header) - pn_len
    for i in range(pn_len):
        protected[pn_offset + i] ^= mask[1 + i]
    return bytes(protected)


def parse_initial(
    datagram: bytes, from_client: bool = True, keys: InitialKeys | None = None
) -> InitialPacket:
    """Unprotect and decrypt the Initial packet at the start of a datagram."""
    data = datagram
    if len(data) < 7:
        raise QuicError("datagram too short")
    first = data[0]
    if first & 0x80 == 0:
        raise QuicError("not a long-header packet")
    if first & 0x40 == 0:
        raise QuicError("fixed bit not set")
    if (first & 0x30) >> 4 != 0x00:
        raise QuicError("not an Initial packet")
    version = int.from_bytes(data[1:5], "big")
    if version != QUIC_V1:
        raise QuicError(f"unsupported version 0x{version:08x}")
    pos = 5
    dcid_len = data[pos]
    pos += 1
    if dcid_len > 20 or pos + dcid_len > len(data):
        raise QuicError("bad DCID")
    dcid = data[pos : pos + dcid_len]
    pos += dcid_len
    if pos >= len(data):
        raise QuicError("truncated before SCID")
    scid_len = data[pos]
    pos += 1
    if scid_len > 20 or pos + scid_len > len(data):
        raise QuicError("bad SCID")
    scid = data[pos : pos + scid_len]
    pos += scid_len
    token_len, pos = decode_varint(data, pos)
    if pos + token_len > len(data):
        raise QuicError("truncated token")
    token = data[pos : pos + token_len]
    pos += token_len
    length, pos = decode_varint(data, pos)
    pn_offset = pos
    if pn_offset + length > len(data):
        raise QuicError("truncated packet body")

    if keys is None:
        if not from_client:
            raise QuicError("server-direction packets need explicit keys")
        keys = derive_initial_keys(dcid)
    direction = keys.client if from_client else keys.server

    sample_at = pn_offset + 4
    if sample_at + 16 > len(data):
        raise QuicError("too short for header-protection sample")
    mask = _hp_mask(direction.hp, data[sample_at : sample_at + 16])
    unprotected_first = first ^ (mask[0] & 0x0F)
    pn_len = (unprotected_first & 0x03) + 1
    pn_bytes = bytes(
        data[pn_offset + i] ^ mask[1 + i] for i in range(pn_len)
    )
    packet_number = int.from_bytes(pn_bytes, "big")

    header = bytes([unprotected_first]) + data[1:pn_offset] + pn_bytes
    ciphertext = data[pn_offset + pn_len : pn_offset + length]
    aead = AESGCM(direction.key)
    try:
        payload = aead.decrypt(_nonce(direction.iv, packet_number), ciphertext, header)
    except Exception as exc:  # InvalidTag
        raise QuicError(f"AEAD decryption failed: {exc}") from exc
    return InitialPacket(
        version=version,
        dcid=dcid,
        scid=scid,
        token=token,
        packet_number=packet_number,
        payload=payload,
        consumed=pn_offset + length,
    )


def reassemble_crypto(payload: bytes) -> bytes:
    """Collect CRYPTO frame data from decrypted Initial frame bytes."""
    chunks: dict[int, bytes] = {}
    pos = 0
    while pos < len(payload):
        frame_type = payload[pos]
        if frame_type == FRAME_PADDING or frame_type == FRAME_PING:
            pos += 1
            continue
        if frame_type in (FRAME_ACK, FRAME_ACK_ECN):
            pos = _skip_ack(payload, pos + 1, frame_type == FRAME_ACK_ECN)
            continue
        if frame_type == FRAME_CRYPTO:
            offset, pos = decode_varint(payload, pos + 1)
            length, pos = decode_varint(payload, pos)
            if pos + length > len(payload):
                raise QuicError("truncated CRYPTO frame")
            chunks[offset] = payload[pos : pos + length]
            pos += length
            continue
        if frame_type == FRAME_CONNECTION_CLOSE:
            break
        raise QuicError(f"unexpected frame type 0x{frame_type:02x} in Initial")
    stream = bytearray()
    for offset in sorted(chunks):
        chunk = chunks[offset]
        if offset > len(stream):
            raise QuicError("gap in CRYPTO stream")
        stream[offset : offset + len(chunk)] = chunk
    return bytes(stream)


def _skip_ack(payload: bytes, pos: int, ecn: bool) -> int:
    _, pos = decode_varint(payload, pos)  # largest acked
    _, pos = decode_varint(payload, pos)  # ack delay
    range_count, pos = decode_varint(payload, pos)
    _, pos = decode_varint(payload, pos)  # first ack range
    for _ in range(range_count):
        _, pos = decode_varint(payload, pos)
        _, pos = decode_varint(payload, pos)
    if ecn:
        for _ in range(3):
            _, pos = decode_varint(payload, pos)
    return pos
