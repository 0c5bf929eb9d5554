"""Trust machinery for the broker-as-CA model.

The broker generates a 4096-bit RSA CA key with a self-signed certificate,
issues 2048-bit RSA keypairs to every registered service, and publishes
the CA certificate plus an allowed-service list (identity -> public key)
that every endpoint loads at startup.  Certificates use a fixed-order
binary encoding rather than X.509; signatures are RSA-PSS over SHA-256.

Challenge signatures bind a fresh nonce to a caller-supplied context so
a signature produced for one protocol step can never be spliced into
another; the broker's replay cache absorbs re-presented nonces.
"""

from __future__ import annotations

import secrets
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.exceptions import InvalidSignature

from .errors import DuplicateIdentity, PkiError, WireError

CA_KEY_BITS = 4096
SERVICE_KEY_BITS = 2048
DEFAULT_VALIDITY_S = 24 * 3600
FRESHNESS_WINDOW_MS = 5000
REPLAY_CACHE_SIZE = 65536
NONCE_LEN = 16

_PSS = padding.PSS(mgf=padding.MGF1(hashes.SHA256()),
                   salt_length=padding.PSS.DIGEST_LENGTH)
_CHALLENGE_TAG = b"shmguard-challenge\x00"
_CERT_TAG = b"shmguard-cert\x00"

_u32 = struct.Struct("<I")
_u64 = struct.Struct("<Q")


def _lp(data: bytes) -> bytes:
    return _u32.pack(len(data)) + data


def _read_lp(buf: bytes, off: int) -> tuple[bytes, int]:
    if off + 4 > len(buf):
        raise WireError("truncated length prefix")
    (n,) = _u32.unpack_from(buf, off)
    off += 4
    if off + n > len(buf):
        raise WireError("length prefix overruns buffer")
    return buf[off:off + n], off + n


def now_ms() -> int:
    return time.time_ns() // 1_000_000


@dataclass(frozen=True)
class Certificate:
    service_id: int
    vm_id: int
    public_key_der: bytes
    issued_at: int        # unix seconds
    expires_at: int
    signature: bytes

    def signed_payload(self) -> bytes:
        return (_CERT_TAG
                + _u32.pack(self.service_id) + _u32.pack(self.vm_id)
                + _lp(self.public_key_der)
                + _u64.pack(self.issued_at) + _u64.pack(self.expires_at))

    def to_bytes(self) -> bytes:
        return self.signed_payload() + _lp(self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        off = len(_CERT_TAG)
        if data[:off] != _CERT_TAG:
            raise WireError("not a certificate blob")
        (service_id,) = _u32.unpack_from(data, off); off += 4
        (vm_id,) = _u32.unpack_from(data, off); off += 4
        der, off = _read_lp(data, off)
        (issued,) = _u64.unpack_from(data, off); off += 8
        (expires,) = _u64.unpack_from(data, off); off += 8
        sig, off = _read_lp(data, off)
        if off != len(data):
            raise WireError("trailing bytes after certificate")
        return cls(service_id, vm_id, der, issued, expires, sig)

    def public_key(self):
        return serialization.load_der_public_key(self.public_key_der)


@dataclass(frozen=True)
class Nonce:
    value: bytes
    timestamp_ms: int

    @classmethod
    def fresh(cls, now: int | None = None) -> "Nonce":
        return cls(secrets.token_bytes(NONCE_LEN),
                   now_ms() if now is None else now)

    def to_bytes(self) -> bytes:
        return self.value + _u64.pack(self.timestamp_ms)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Nonce":
        if len(data) != NONCE_LEN + 8:
            raise WireError("bad nonce length")
        (ts,) = _u64.unpack_from(data, NONCE_LEN)
        return cls(data[:NONCE_LEN], ts)


class CertReason(Enum):
    BAD_SIGNATURE = "bad-signature"
    NOT_ALLOWED = "not-allowed"
    KEY_MISMATCH = "key-mismatch"
    NOT_YET_VALID = "not-yet-valid"
    EXPIRED = "expired"


@dataclass(frozen=True)
class CertVerdict:
    valid: bool
    reason: CertReason | None = None

    def __bool__(self) -> bool:
        return self.valid


class ChallengeReason(Enum):
    BAD_SIGNATURE = "bad-signature"
    STALE = "stale"
    REPLAY = "replay"


@dataclass(frozen=True)
class ChallengeVerdict:
    fresh: bool
    reason: ChallengeReason | None = None

    def __bool__(self) -> bool:
        return self.fresh


class AllowedServiceList:
    """Identity -> verification key map published by the broker."""

    def __init__(self):
        self._entries: dict[tuple[int, int], bytes] = {}

    def add(self, service_id: int, vm_id: int, public_key_der: bytes) -> None:
        key = (service_id, vm_id)
        if key in self._entries:
            raise DuplicateIdentity(f"service {service_id} vm {vm_id} already listed")
        self._entries[key] = public_key_der

    def lookup(self, service_id: int, vm_id: int) -> bytes | None:
        return self._entries.get((service_id, vm_id))

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def identities(self):
        return sorted(self._entries)

    def service_ids(self) -> set[int]:
        return {sid for sid, _ in self._entries}

    def to_bytes(self) -> bytes:
        out = [_u32.pack(len(self._entries))]
        for (sid, vid) in sorted(self._entries):
            out.append(_u32.pack(sid) + _u32.pack(vid)
                       + _lp(self._entries[(sid, vid)]))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "AllowedServiceList":
        lst = cls()
        (count,) = _u32.unpack_from(data, 0)
        off = 4
        for _ in range(count):
            (sid,) = _u32.unpack_from(data, off); off += 4
            (vid,) = _u32.unpack_from(data, off); off += 4
            der, off = _read_lp(data, off)
            lst.add(sid, vid, der)
        if off != len(data):
            raise WireError("trailing bytes after allowed-service list")
        return lst


class CertificateAuthority:
    """The broker's signing identity."""

    def __init__(self, private_key, certificate: Certificate):
        self.private_key = private_key
        self.certificate = certificate

    @classmethod
    def generate(cls, now: int | None = None,
                 validity_s: int = 10 * 365 * 24 * 3600) -> "CertificateAuthority":
        now = int(time.time()) if now is None else now
        key = rsa.generate_private_key(public_exponent=65537, key_size=CA_KEY_BITS)
        der = key.public_key().public_bytes(
            serialization.Encoding.DER,
            serialization.PublicFormat.SubjectPublicKeyInfo)
        unsigned = Certificate(0, 0, der, now, now + validity_s, b"")
        sig = key.sign(unsigned.signed_payload(), _PSS, hashes.SHA256())
        return cls(key, Certificate(0, 0, der, now, now + validity_s, sig))

    def issue(self, service_id: int, vm_id: int,
              validity_s: int = DEFAULT_VALIDITY_S,
              now: int | None = None):
        """Issue a service keypair; returns (private_key, certificate)."""
        if service_id == 0 or vm_id == 0:
            raise PkiError("service_id/vm_id 0 are reserved for the host")
        now = int(time.time()) if now is None else now
        key = rsa.generate_private_key(public_exponent=65537,
                                       key_size=SERVICE_KEY_BITS)
        der = key.public_key().public_bytes(
            serialization.Encoding.DER,
            serialization.PublicFormat.SubjectPublicKeyInfo)
        unsigned = Certificate(service_id, vm_id, der, now, now + validity_s, b"")
        sig = self.private_key.sign(unsigned.signed_payload(), _PSS,
                                    hashes.SHA256())
        return key, Certificate(service_id, vm_id, der, now,
                                now + validity_s, sig)


def verify_certificate(ca_certificate: Certificate,
                       allowed: AllowedServiceList,
                       cert: Certificate,
                       now: int | None = None) -> CertVerdict:
    now = int(time.time()) if now is None else now
    try:
        ca_certificate.public_key().verify(cert.signature, cert.signed_payload(),
                                           _PSS, hashes.SHA256())
    except (InvalidSignature, ValueError):
        return CertVerdict(False, CertReason.BAD_SIGNATURE)
    listed = allowed.lookup(cert.service_id, cert.vm_id)
    if listed is None:
        return CertVerdict(False, CertReason.NOT_ALLOWED)
    if listed != cert.public_key_der:
        return CertVerdict(False, CertReason.KEY_MISMATCH)
    if now < cert.issued_at:
        return CertVerdict(False, CertReason.NOT_YET_VALID)
    if now >= cert.expires_at:
        return CertVerdict(False, CertReason.EXPIRED)
    return CertVerdict(True)


def _challenge_message(nonce: Nonce, context: bytes) -> bytes:
    return _CHALLENGE_TAG + nonce.to_bytes() + _lp(context)


def sign_challenge(private_key, nonce: Nonce, context: bytes) -> bytes:
    return private_key.sign(_challenge_message(nonce, context), _PSS,
                            hashes.SHA256())


class ReplayCache:
    """Bounded LRU of consumed nonce values (single verifier: the broker)."""

    def __init__(self, capacity: int = REPLAY_CACHE_SIZE):
        self._capacity = capacity
        self._seen: OrderedDict[bytes, None] = OrderedDict()
        self._lock = threading.Lock()

    def __contains__(self, value: bytes) -> bool:
        with self._lock:
            return value in self._seen

    def check_and_insert(self, value: bytes) -> bool:
        """True if the value was fresh (and is now recorded)."""
        with self._lock:
            if value in self._seen:
                return False
            self._seen[value] = None
            if len(self._seen) > self._capacity:
                self._seen.popitem(last=False)
            return True

    def __len__(self) -> int:
        with self._lock:
            return len(self._seen)


def verify_challenge(public_key_der: bytes, nonce: Nonce, context: bytes,
                     signature: bytes, now: int | None = None,
                     replay_cache: ReplayCache | None = None,
                     window_ms: int = FRESHNESS_WINDOW_MS) -> ChallengeVerdict:
    """Check a challenge signature plus nonce freshness.

    Signature validity is checked before the cache is touched, so a
    forged signature cannot poison the cache for the honest holder.
    Passing ``replay_cache=None`` skips replay bookkeeping (used by
    ephemeral verifiers that never see the same nonce twice).
    """
    now = now_ms() if now is None else now
    try:
        key = serialization.load_der_public_key(public_key_der)
        key.verify(signature, _challenge_message(nonce, context), _PSS,
                   hashes.SHA256())
    except (InvalidSignature, ValueError):
        return ChallengeVerdict(False, ChallengeReason.BAD_SIGNATURE)
    if abs(now - nonce.timestamp_ms) > window_ms:
        return ChallengeVerdict(False, ChallengeReason.STALE)
    if replay_cache is not None and not replay_cache.check_and_insert(nonce.value):
        return ChallengeVerdict(False, ChallengeReason.REPLAY)
    return ChallengeVerdict(True)


# -- provisioning files -----------------------------------------------------

CA_CERT_FILE = "ca_cert.bin"
ALLOWED_FILE = "allowed_services.bin"


def key_filename(service_id: int, vm_id: int) -> str:
    return f"svc_{service_id}_{vm_id}.key"


def cert_filename(service_id: int, vm_id: int) -> str:
    return f"svc_{service_id}_{vm_id}.cert"


def write_private_key(path: Path, key) -> None:
    pem = key.private_bytes(serialization.Encoding.PEM,
                            serialization.PrivateFormat.PKCS8,
                            serialization.NoEncryption())
    path.write_bytes(pem)


def load_private_key(path: Path):
    # skip the RSA consistency check: these files are provisioned by our
    # own broker and the check costs ~50 ms per load
    return serialization.load_pem_private_key(
        Path(path).read_bytes(), password=None,
        unsafe_skip_rsa_key_validation=True)


def write_credentials(directory: Path, ca: CertificateAuthority,
                      allowed: AllowedServiceList, issued) -> None:
    """Publish CA cert, allowed list, and per-service key/cert files.

    ``issued`` maps (service_id, vm_id) -> (private_key, Certificate).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / CA_CERT_FILE).write_bytes(ca.certificate.to_bytes())
    (directory / ALLOWED_FILE).write_bytes(allowed.to_bytes())
    for (sid, vid), (key, cert) in issued.items():
        write_private_key(directory / key_filename(sid, vid), key)
        (directory / cert_filename(sid, vid)).write_bytes(cert.to_bytes())


def load_ca_certificate(directory: Path) -> Certificate:
    return Certificate.from_bytes((Path(directory) / CA_CERT_FILE).read_bytes())


def load_allowed_list(directory: Path) -> AllowedServiceList:
    return AllowedServiceList.from_bytes(
        (Path(directory) / ALLOWED_FILE).read_bytes())
