"""Self-signed certificate material for the desk-scale origin."""

from __future__ import annotations

import datetime
import ipaddress
import tempfile
from pathlib import Path

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import NameOID


def _name(common_name: str) -> x509.Name:
    return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)])


def _san(hostnames: list[str]) -> x509.SubjectAlternativeName:
    entries = []
    for host in hostnames:
        try:
            entries.append(x509.IPAddress(ipaddress.ip_address(host)))
        except ValueError:
            entries.append(x509.DNSName(host))
    return x509.SubjectAlternativeName(entries)


class CertStore:
    """A throwaway CA plus one leaf covering all configured hostnames."""

    def __init__(self, hostnames: list[str], directory: str | None = None):
        self._dir = Path(directory) if directory else Path(tempfile.mkdtemp(prefix="zraudit-certs-"))
        self._dir.mkdir(parents=True, exist_ok=True)
        now = datetime.datetime.now(datetime.timezone.utc)
        not_after = now + datetime.timedelta(days=7)

        self.ca_key = ec.generate_private_key(ec.SECP256R1())
        self.ca_cert = (
            x509.CertificateBuilder()
            .subject_name(_name("zraudit test CA"))
            .issuer_name(_name("zraudit test CA"))
            .public_key(self.ca_key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now)
            .not_valid_after(not_after)
            .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
            .sign(self.ca_key, hashes.SHA256())
        )

        self.leaf_key = ec.generate_private_key(ec.SECP256R1())
        self.leaf_cert = (
            x509.CertificateBuilder()
            .subject_name(_name(hostnames[0] if hostnames else "origin"))
            .issuer_name(self.ca_cert.subject)
            .public_key(self.leaf_key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now)
            .not_valid_after(not_after)
            .add_extension(_san(hostnames), critical=False)
            .sign(self.ca_key, hashes.SHA256())
        )

        self.ca_path = str(self._dir / "ca.pem")
        self.cert_path = str(self._dir / "leaf.pem")
        self.key_path = str(self._dir / "leaf.key")
        Path(self.ca_path).write_bytes(
            self.ca_cert.public_bytes(serialization.Encoding.PEM)
        )
        Path(self.cert_path).write_bytes(
            self.leaf_cert.public_bytes(serialization.Encoding.PEM)
        )
        Path(self.key_path).write_bytes(
            self.leaf_key.private_bytes(
                serialization.Encoding.PEM,
                serialization.PrivateFormat.PKCS8,
                serialization.NoEncryption(),
            )
        )

    @property
    def leaf_der(self) -> bytes:
        return self.leaf_cert.public_bytes(serialization.Encoding.DER)


def verify_leaf(leaf_der: bytes, hostname: str, ca_pem_path: str) -> bool:
    """Check a presented leaf: CA signature, validity window, SAN match."""
    try:
        leaf = x509.load_der_x509_certificate(leaf_der)
        ca = x509.load_pem_x509_certificate(Path(ca_pem_path).read_bytes())
        ca.public_key().verify(
            leaf.signature, leaf.tbs_certificate_bytes, ec.ECDSA(leaf.signature_hash_algorithm)
        )
    except Exception:
        return False
    now = datetime.datetime.now(datetime.timezone.utc)
    if not leaf.not_valid_before_utc <= now <= leaf.not_valid_after_utc:
        return False
    try:
        san = leaf.extensions.get_extension_for_class(x509.SubjectAlternativeName).value
    except x509.ExtensionNotFound:
        return False
    names = set(san.get_values_for_type(x509.DNSName))
    if hostname in names:
        return True
    # single-label wildcard match
    if "." in hostname:
        wildcard = "*." + hostname.split(".", 1)[1]
        if wildcard in names:
            return True
    try:
        addr = ipaddress.ip_address(hostname)
    except ValueError:
        return False
    return addr in set(san.get_values_for_type(x509.IPAddress))
