"""Handshake message encoding.

Every message is framed as a 4-byte little-endian length prefix followed
by a 1-byte message type and fixed-order fields.  The frame bytes (prefix
included) are what the transcript chain folds, so the hash all parties
attest to covers exactly what traveled through the region.  The full
layout is documented in docs/handshake-wire.md.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import Enum, IntEnum

from .errors import WireError
from .pki import Nonce

PROTOCOL_VERSION = 1
CIPHER_RSA_PSS_SHA256 = 0x0001
SUPPORTED_CIPHERS = (CIPHER_RSA_PSS_SHA256,)

_u16 = struct.Struct("<H")
_u32 = struct.Struct("<I")
_u64 = struct.Struct("<Q")

TRANSCRIPT_SEED = bytes(32)


def transcript_fold(prev: bytes, framed_message: bytes) -> bytes:
    """Advance the transcript chain by one framed message."""
    return hashlib.sha256(prev + framed_message).digest()


class MsgType(IntEnum):
    CLIENT_HELLO = 1
    HOST_HELLO = 2
    CLIENT_AUTH = 3
    SERVER_REQUEST = 4
    SERVER_HELLO = 5
    CHANNEL_GRANT = 6
    ABORT = 7
    REGISTER = 8
    REGISTER_ACK = 9


class AbortReason(Enum):
    PROTOCOL_ERROR = 1
    UNKNOWN_SERVICE = 2
    BAD_CERTIFICATE = 3
    BAD_CHALLENGE = 4
    REPLAY = 5
    REGION_EXHAUSTED = 6
    TIMEOUT = 7
    NO_LISTENER = 8
    REJECTED = 9
    TRANSCRIPT_MISMATCH = 10
    SHUTDOWN = 11


class _Writer:
    def __init__(self, msg_type: MsgType):
        self._parts = [bytes((int(msg_type),))]

    def u8(self, v): self._parts.append(bytes((v,))); return self
    def u16(self, v): self._parts.append(_u16.pack(v)); return self
    def u32(self, v): self._parts.append(_u32.pack(v)); return self
    def u64(self, v): self._parts.append(_u64.pack(v)); return self

    def raw(self, data: bytes, expected_len: int | None = None):
        if expected_len is not None and len(data) != expected_len:
            raise WireError(f"fixed field is {len(data)} bytes, "
                            f"expected {expected_len}")
        self._parts.append(data)
        return self

    def lp(self, data: bytes):
        self._parts.append(_u32.pack(len(data)))
        self._parts.append(data)
        return self

    def bytes(self) -> bytes:
        return b"".join(self._parts)


class _Reader:
    def __init__(self, data: bytes):
        self._data = data
        self._off = 0

    def _take(self, n: int) -> bytes:
        if self._off + n > len(self._data):
            raise WireError("truncated message")
        out = self._data[self._off:self._off + n]
        self._off += n
        return out

    def u8(self) -> int: return self._take(1)[0]
    def u16(self) -> int: return _u16.unpack(self._take(2))[0]
    def u32(self) -> int: return _u32.unpack(self._take(4))[0]
    def u64(self) -> int: return _u64.unpack(self._take(8))[0]
    def raw(self, n: int) -> bytes: return self._take(n)

    def lp(self) -> bytes:
        n = self.u32()
        return self._take(n)

    def done(self) -> None:
        if self._off != len(self._data):
            raise WireError(f"{len(self._data) - self._off} trailing bytes")


@dataclass(frozen=True)
class ClientHello:
    session_id: int
    service_id: int
    vm_id: int
    pid: int
    nonce: Nonce
    version: int = PROTOCOL_VERSION
    cipher_suites: tuple[int, ...] = SUPPORTED_CIPHERS

    TYPE = MsgType.CLIENT_HELLO

    def encode(self) -> bytes:
        w = (_Writer(self.TYPE).u64(self.session_id).u16(self.version)
             .u8(len(self.cipher_suites)))
        for c in self.cipher_suites:
            w.u16(c)
        return (w.u32(self.service_id).u32(self.vm_id).u64(self.pid)
                .raw(self.nonce.to_bytes(), 24).bytes())

    @classmethod
    def _decode(cls, r: _Reader) -> "ClientHello":
        session_id = r.u64()
        version = r.u16()
        ciphers = tuple(r.u16() for _ in range(r.u8()))
        return cls(session_id, r.u32(), r.u32(), r.u64(),
                   Nonce.from_bytes(r.raw(24)), version, ciphers)


@dataclass(frozen=True)
class HostHello:
    session_id: int
    host_certificate: bytes
    selected_cipher: int
    temp_channel_id: int
    host_signature: bytes

    TYPE = MsgType.HOST_HELLO

    def encode(self) -> bytes:
        return (_Writer(self.TYPE).u64(self.session_id)
                .lp(self.host_certificate).u16(self.selected_cipher)
                .u32(self.temp_channel_id).lp(self.host_signature).bytes())

    @classmethod
    def _decode(cls, r: _Reader) -> "HostHello":
        return cls(r.u64(), r.lp(), r.u16(), r.u32(), r.lp())


@dataclass(frozen=True)
class ClientAuth:
    session_id: int
    client_certificate: bytes
    challenge_signature: bytes
    target_service_id: int

    TYPE = MsgType.CLIENT_AUTH

    def encode(self) -> bytes:
        return (_Writer(self.TYPE).u64(self.session_id)
                .lp(self.client_certificate).lp(self.challenge_signature)
                .u32(self.target_service_id).bytes())

    @classmethod
    def _decode(cls, r: _Reader) -> "ClientAuth":
        return cls(r.u64(), r.lp(), r.lp(), r.u32())


@dataclass(frozen=True)
class ServerRequest:
    session_id: int
    client_service_id: int
    client_vm_id: int
    client_pid: int
    nonce: Nonce
    temp_channel_id: int
    transcript_seed: bytes  # host's chain state before this message

    TYPE = MsgType.SERVER_REQUEST

    def encode(self) -> bytes:
        return (_Writer(self.TYPE).u64(self.session_id)
                .u32(self.client_service_id).u32(self.client_vm_id)
                .u64(self.client_pid).raw(self.nonce.to_bytes(), 24)
                .u32(self.temp_channel_id)
                .raw(self.transcript_seed, 32).bytes())

    @classmethod
    def _decode(cls, r: _Reader) -> "ServerRequest":
        return cls(r.u64(), r.u32(), r.u32(), r.u64(),
                   Nonce.from_bytes(r.raw(24)), r.u32(), r.raw(32))


@dataclass(frozen=True)
class ServerHello:
    session_id: int
    server_certificate: bytes
    challenge_signature: bytes
    accept: bool
    cipher_suites: tuple[int, ...] = SUPPORTED_CIPHERS

    TYPE = MsgType.SERVER_HELLO

    def encode(self) -> bytes:
        w = (_Writer(self.TYPE).u64(self.session_id)
             .lp(self.server_certificate).lp(self.challenge_signature)
             .u8(1 if self.accept else 0).u8(len(self.cipher_suites)))
        for c in self.cipher_suites:
            w.u16(c)
        return w.bytes()

    @classmethod
    def _decode(cls, r: _Reader) -> "ServerHello":
        session_id = r.u64()
        cert = r.lp()
        sig = r.lp()
        accept = r.u8() != 0
        ciphers = tuple(r.u16() for _ in range(r.u8()))
        return cls(session_id, cert, sig, accept, ciphers)


@dataclass(frozen=True)
class ChannelGrant:
    session_id: int
    channel_id: int
    buffer_size: int
    peer_service_id: int
    peer_vm_id: int
    peer_pid: int
    transcript_hash: bytes  # final chain value over hello..server-hello
    prefix_hash: bytes      # chain value at the receiver's last own message

    TYPE = MsgType.CHANNEL_GRANT

    def encode(self) -> bytes:
        return (_Writer(self.TYPE).u64(self.session_id).u32(self.channel_id)
                .u64(self.buffer_size).u32(self.peer_service_id)
                .u32(self.peer_vm_id).u64(self.peer_pid)
                .raw(self.transcript_hash, 32).raw(self.prefix_hash, 32)
                .bytes())

    @classmethod
    def _decode(cls, r: _Reader) -> "ChannelGrant":
        return cls(r.u64(), r.u32(), r.u64(), r.u32(), r.u32(), r.u64(),
                   r.raw(32), r.raw(32))


@dataclass(frozen=True)
class Abort:
    session_id: int
    reason: AbortReason
    detail: str = ""

    TYPE = MsgType.ABORT

    def encode(self) -> bytes:
        return (_Writer(self.TYPE).u64(self.session_id)
                .u16(self.reason.value).lp(self.detail.encode()).bytes())

    @classmethod
    def _decode(cls, r: _Reader) -> "Abort":
        session_id = r.u64()
        try:
            reason = AbortReason(r.u16())
        except ValueError as exc:
            raise WireError("unknown abort reason") from exc
        return cls(session_id, reason, r.lp().decode(errors="replace"))


@dataclass(frozen=True)
class Register:
    """Listener announcement on the host channel (session-less).

    Signed with the service key so a rogue process cannot claim another
    service's listening slot.
    """

    service_id: int
    vm_id: int
    pid: int
    nonce: Nonce
    signature: bytes
    session_id: int = 0

    TYPE = MsgType.REGISTER

    def encode(self) -> bytes:
        return (_Writer(self.TYPE).u64(self.session_id).u32(self.service_id)
                .u32(self.vm_id).u64(self.pid).raw(self.nonce.to_bytes(), 24)
                .lp(self.signature).bytes())

    @classmethod
    def _decode(cls, r: _Reader) -> "Register":
        session_id = r.u64()
        return cls(r.u32(), r.u32(), r.u64(), Nonce.from_bytes(r.raw(24)),
                   r.lp(), session_id)


@dataclass(frozen=True)
class RegisterAck:
    ok: bool
    session_id: int = 0

    TYPE = MsgType.REGISTER_ACK

    def encode(self) -> bytes:
        return (_Writer(self.TYPE).u64(self.session_id)
                .u8(1 if self.ok else 0).bytes())

    @classmethod
    def _decode(cls, r: _Reader) -> "RegisterAck":
        session_id = r.u64()
        return cls(r.u8() != 0, session_id)


Message = (ClientHello | HostHello | ClientAuth | ServerRequest
           | ServerHello | ChannelGrant | Abort | Register | RegisterAck)

_DECODERS = {
    MsgType.CLIENT_HELLO: ClientHello._decode,
    MsgType.HOST_HELLO: HostHello._decode,
    MsgType.CLIENT_AUTH: ClientAuth._decode,
    MsgType.SERVER_REQUEST: ServerRequest._decode,
    MsgType.SERVER_HELLO: ServerHello._decode,
    MsgType.CHANNEL_GRANT: ChannelGrant._decode,
    MsgType.ABORT: Abort._decode,
    MsgType.REGISTER: Register._decode,
    MsgType.REGISTER_ACK: RegisterAck._decode,
}


def decode(body: bytes) -> Message:
    """Decode a message body (type byte + fields, no length prefix)."""
    if not body:
        raise WireError("empty message")
    try:
        msg_type = MsgType(body[0])
    except ValueError as exc:
        raise WireError(f"unknown message type {body[0]}") from exc
    r = _Reader(body[1:])
    msg = _DECODERS[msg_type](r)
    r.done()
    return msg


def framed(msg_or_body) -> bytes:
    """Frame bytes as they appear in the ring: length prefix + body."""
    body = msg_or_body if isinstance(msg_or_body, (bytes, bytearray)) \
        else msg_or_body.encode()
    return _u32.pack(len(body)) + bytes(body)
