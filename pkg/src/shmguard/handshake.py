"""The eight-step brokered mutual-authentication protocol.

Three explicit state machines (client, trusted host, server) exchange the
messages defined in :mod:`shmguard.wire`.  The machines are sans-IO: they
consume decoded messages and return messages to deliver, so protocol
behavior is testable without processes or shared memory.  The broker and
the socket-style API drive them over the real transport.

Transcript binding: every framed message folds into a running SHA-256
chain.  The host's ServerRequest carries its chain state so the server
continues the same chain, and the channel grants carry both the final
chain value (the attestation token for gate establishment) and the
receiver-verifiable prefix.  Each challenge signature's context includes
the signer's chain state, so tampering with any earlier message makes the
signature verification fail at the host.

Message flow (host mediates; temporary channels carry everything after
the hello exchange):

  1. client -> host   ClientHello          (host channel)
  2. host -> client   HostHello            (host channel; names temp channel)
  3. client -> host   ClientAuth           (client temp channel)
  4. host -> server   ServerRequest        (server temp channel)
  5. server -> host   ServerHello          (server temp channel)
  6. host -> both     ChannelGrant         (temp channels, then released)
  7. endpoints        finalize + data transfer on the granted channel
"""

from __future__ import annotations

import logging
import secrets
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Protocol

from .errors import HandshakeAborted, NoFreeSlot, RegionExhausted
from .pki import (
    AllowedServiceList,
    Certificate,
    CertificateAuthority,
    Nonce,
    ReplayCache,
    ChallengeReason,
    now_ms,
    sign_challenge,
    verify_certificate,
    verify_challenge,
)
from .wire import (
    Abort,
    AbortReason,
    ChannelGrant,
    ClientAuth,
    ClientHello,
    HostHello,
    Message,
    Register,
    ServerHello,
    ServerRequest,
    SUPPORTED_CIPHERS,
    CIPHER_RSA_PSS_SHA256,
    PROTOCOL_VERSION,
    TRANSCRIPT_SEED,
    framed,
    transcript_fold,
)

log = logging.getLogger("shmguard.handshake")

_u32 = struct.Struct("<I")
_u64 = struct.Struct("<Q")


@dataclass(frozen=True)
class ServiceIdentity:
    service_id: int
    vm_id: int
    pid: int

    def __str__(self) -> str:
        return f"svc{self.service_id}@vm{self.vm_id}/pid{self.pid}"


class ClientPhase(Enum):
    INIT = "INIT"
    SENT_HELLO = "SENT_HELLO"
    HOST_VERIFIED = "HOST_VERIFIED"
    AUTHED = "AUTHED"
    GRANTED = "GRANTED"
    ABORTED = "ABORTED"


class HostPhase(Enum):
    AWAIT_HELLO = "AWAIT_HELLO"
    AWAIT_AUTH = "AWAIT_AUTH"
    AWAIT_SERVER = "AWAIT_SERVER"
    GRANTED = "GRANTED"
    ABORTED = "ABORTED"


class ServerPhase(Enum):
    LISTENING = "LISTENING"
    ACCEPTED = "ACCEPTED"
    GRANTED = "GRANTED"
    ABORTED = "ABORTED"


def _ctx_host_hello(session_id: int, chain: bytes) -> bytes:
    return b"shmguard:host-hello:" + _u64.pack(session_id) + chain


def _ctx_client_auth(session_id: int, chain: bytes, target_service_id: int) -> bytes:
    return (b"shmguard:client-auth:" + _u64.pack(session_id) + chain
            + _u32.pack(target_service_id))


def _ctx_server_hello(session_id: int, chain: bytes, accept: bool) -> bytes:
    return (b"shmguard:server-hello:" + _u64.pack(session_id) + chain
            + (b"\x01" if accept else b"\x00"))


def register_context(service_id: int, vm_id: int, pid: int) -> bytes:
    return (b"shmguard:register:" + _u32.pack(service_id)
            + _u32.pack(vm_id) + _u64.pack(pid))


def make_register(identity: ServiceIdentity, private_key) -> Register:
    nonce = Nonce.fresh()
    sig = sign_challenge(private_key, nonce,
                         register_context(identity.service_id,
                                          identity.vm_id, identity.pid))
    return Register(identity.service_id, identity.vm_id, identity.pid,
                    nonce, sig)


class _SessionBase:
    role = "?"

    def __init__(self):
        self.session_id = 0
        self.transcript_hash = TRANSCRIPT_SEED
        self.transitions: list[str] = []

    def _fold(self, msg: Message) -> None:
        self.transcript_hash = transcript_fold(self.transcript_hash,
                                               framed(msg))

    def _log_transition(self, old, new, msg_name: str) -> None:
        line = f"{self.role} {self.session_id:016x} {old.value}->{new.value} {msg_name}"
        self.transitions.append(line)
        log.debug("%s", line)

    def _abort(self, reason: AbortReason, detail: str = ""):
        raise HandshakeAborted(reason, detail)


class ClientSession(_SessionBase):
    """Connecting endpoint's half of the protocol."""

    role = "CLIENT"

    def __init__(self, identity: ServiceIdentity, private_key,
                 certificate: Certificate, ca_certificate: Certificate,
                 allowed: AllowedServiceList, target_service_id: int):
        super().__init__()
        self.identity = identity
        self._key = private_key
        self._certificate = certificate
        self._ca_certificate = ca_certificate
        self._allowed = allowed
        self.target_service_id = target_service_id
        self.phase = ClientPhase.INIT
        self.session_id = secrets.randbits(64)
        self.nonce: Nonce | None = None
        self.temp_channel_id: int | None = None
        self.grant: ChannelGrant | None = None

    def start(self) -> ClientHello:
        if self.phase is not ClientPhase.INIT:
            self._fail(AbortReason.PROTOCOL_ERROR, "start() called twice")
        self.nonce = Nonce.fresh()
        hello = ClientHello(self.session_id, self.identity.service_id,
                            self.identity.vm_id, self.identity.pid, self.nonce)
        self._fold(hello)
        self._move(ClientPhase.SENT_HELLO, "CLIENT_HELLO")
        return hello

    def on_host_hello(self, msg: HostHello) -> ClientAuth:
        self._expect(ClientPhase.SENT_HELLO, msg)
        try:
            host_cert = Certificate.from_bytes(msg.host_certificate)
        except Exception:
            self._fail(AbortReason.BAD_CERTIFICATE, "unparseable host certificate")
        verdict = verify_certificate(self._ca_certificate, self._allowed, host_cert)
        if not verdict:
            self._fail(AbortReason.BAD_CERTIFICATE,
                       f"host certificate: {verdict.reason.value}")
        if host_cert.public_key_der != self._ca_certificate.public_key_der:
            self._fail(AbortReason.BAD_CERTIFICATE,
                       "host certificate key is not the CA key")
        if msg.selected_cipher not in SUPPORTED_CIPHERS:
            self._fail(AbortReason.PROTOCOL_ERROR, "unsupported cipher selected")
        chain_after_hello = self.transcript_hash
        check = verify_challenge(
            host_cert.public_key_der, self.nonce,
            _ctx_host_hello(self.session_id, chain_after_hello),
            msg.host_signature, replay_cache=None)
        if not check:
            self._fail(AbortReason.BAD_CHALLENGE,
                       f"host signature: {check.reason.value}")
        self._move(ClientPhase.HOST_VERIFIED, "HOST_HELLO")
        self._fold(msg)
        self.temp_channel_id = msg.temp_channel_id

        sig = sign_challenge(
            self._key, self.nonce,
            _ctx_client_auth(self.session_id, self.transcript_hash,
                             self.target_service_id))
        auth = ClientAuth(self.session_id, self._certificate.to_bytes(),
                          sig, self.target_service_id)
        self._fold(auth)
        self._move(ClientPhase.AUTHED, "CLIENT_AUTH")
        return auth

    def accept_grant(self, msg: ChannelGrant) -> bytes:
        """Validate the grant against the local transcript; returns the
        attestation token for gate establishment."""
        self._expect(ClientPhase.AUTHED, msg)
        if msg.prefix_hash != self.transcript_hash:
            self._fail(AbortReason.TRANSCRIPT_MISMATCH,
                       "grant does not extend this session's transcript")
        self.transcript_hash = msg.transcript_hash
        self.grant = msg
        self._move(ClientPhase.GRANTED, "CHANNEL_GRANT")
        return msg.transcript_hash

    def handle(self, msg: Message):
        """Total dispatch: any unexpected message aborts the session."""
        if isinstance(msg, Abort):
            self._move(ClientPhase.ABORTED, "ABORT")
            raise HandshakeAborted(msg.reason, msg.detail)
        if isinstance(msg, HostHello):
            return self.on_host_hello(msg)
        if isinstance(msg, ChannelGrant):
            return self.accept_grant(msg)
        self._fail(AbortReason.PROTOCOL_ERROR,
                   f"unexpected {type(msg).__name__} in {self.phase.value}")

    def _expect(self, phase: ClientPhase, msg: Message) -> None:
        if self.phase is not phase or msg.session_id != self.session_id:
            self._fail(AbortReason.PROTOCOL_ERROR,
                       f"{type(msg).__name__} in phase {self.phase.value}")

    def _move(self, new: ClientPhase, msg_name: str) -> None:
        self._log_transition(self.phase, new, msg_name)
        self.phase = new

    def _fail(self, reason: AbortReason, detail: str = ""):
        self._move(ClientPhase.ABORTED, f"fail:{reason.name}")
        self._abort(reason, detail)


class ServerSession(_SessionBase):
    """Listening endpoint's half of the protocol."""

    role = "SERVER"

    def __init__(self, identity: ServiceIdentity, private_key,
                 certificate: Certificate, ca_certificate: Certificate,
                 allowed: AllowedServiceList,
                 accept_fn: Callable[[ServiceIdentity], bool] | None = None):
        super().__init__()
        self.identity = identity
        self._key = private_key
        self._certificate = certificate
        self._ca_certificate = ca_certificate
        self._allowed = allowed
        self._accept_fn = accept_fn
        self.phase = ServerPhase.LISTENING
        self.client_identity: ServiceIdentity | None = None
        self.grant: ChannelGrant | None = None

    def on_request(self, msg: ServerRequest) -> ServerHello:
        if self.phase is not ServerPhase.LISTENING:
            self._fail(AbortReason.PROTOCOL_ERROR,
                       f"SERVER_REQUEST in phase {self.phase.value}")
        self.session_id = msg.session_id
        self.client_identity = ServiceIdentity(
            msg.client_service_id, msg.client_vm_id, msg.client_pid)
        # continue the host's chain from its carried state
        self.transcript_hash = transcript_fold(msg.transcript_seed, framed(msg))
        accept = True
        if self._accept_fn is not None:
            accept = bool(self._accept_fn(self.client_identity))
        sig = sign_challenge(
            self._key, msg.nonce,
            _ctx_server_hello(self.session_id, self.transcript_hash, accept))
        hello = ServerHello(self.session_id, self._certificate.to_bytes(),
                            sig, accept)
        self._fold(hello)
        self._move(ServerPhase.ACCEPTED, "SERVER_HELLO")
        if not accept:
            self._move(ServerPhase.ABORTED, "fail:REJECTED")
        return hello

    def accept_grant(self, msg: ChannelGrant) -> bytes:
        if self.phase is not ServerPhase.ACCEPTED or msg.session_id != self.session_id:
            self._fail(AbortReason.PROTOCOL_ERROR,
                       f"CHANNEL_GRANT in phase {self.phase.value}")
        if (msg.prefix_hash != self.transcript_hash
                or msg.transcript_hash != self.transcript_hash):
            self._fail(AbortReason.TRANSCRIPT_MISMATCH,
                       "grant transcript differs from the local chain")
        self.grant = msg
        self._move(ServerPhase.GRANTED, "CHANNEL_GRANT")
        return msg.transcript_hash

    def handle(self, msg: Message):
        if isinstance(msg, Abort):
            self._move(ServerPhase.ABORTED, "ABORT")
            raise HandshakeAborted(msg.reason, msg.detail)
        if isinstance(msg, ServerRequest):
            return self.on_request(msg)
        if isinstance(msg, ChannelGrant):
            return self.accept_grant(msg)
        self._fail(AbortReason.PROTOCOL_ERROR,
                   f"unexpected {type(msg).__name__} in {self.phase.value}")

    def _move(self, new: ServerPhase, msg_name: str) -> None:
        self._log_transition(self.phase, new, msg_name)
        self.phase = new

    def _fail(self, reason: AbortReason, detail: str = ""):
        self._move(ServerPhase.ABORTED, f"fail:{reason.name}")
        self._abort(reason, detail)


class HostServices(Protocol):
    """Ports the host state machine needs from its surroundings."""

    def allocate_temp(self, peer: ServiceIdentity) -> int: ...
    def allocate_data(self, server: ServiceIdentity,
                      client: ServiceIdentity) -> tuple[int, int]: ...
    def release(self, channel_id: int) -> None: ...
    def authorize(self, channel_id: int, pids: set[int], service_ids: set[int],
                  attestation: bytes) -> None: ...
    def establish(self, channel_id: int, attestation: bytes) -> None: ...
    def find_listener(self, target_service_id: int) -> ServiceIdentity | None: ...


class HostSession(_SessionBase):
    """Broker-side mediator: verifies both parties and allocates channels."""

    role = "HOST"

    def __init__(self, services: HostServices, ca: CertificateAuthority,
                 allowed: AllowedServiceList, replay_cache: ReplayCache):
        super().__init__()
        self._services = services
        self._ca = ca
        self._allowed = allowed
        self._replay = replay_cache
        self.phase = HostPhase.AWAIT_HELLO
        self.client_identity: ServiceIdentity | None = None
        self.server_identity: ServiceIdentity | None = None
        self.client_nonce: Nonce | None = None
        self.server_nonce: Nonce | None = None
        self.client_temp: int | None = None
        self.server_temp: int | None = None
        self.data_channel: int | None = None
        self.target_service_id: int | None = None
        self._client_pub: bytes | None = None
        self._chain_at_client_auth: bytes = TRANSCRIPT_SEED

    # -- step 2 ---------------------------------------------------------

    def on_client_hello(self, msg: ClientHello) -> HostHello:
        self._expect_phase(HostPhase.AWAIT_HELLO, msg, check_session=False)
        self.session_id = msg.session_id
        if msg.version != PROTOCOL_VERSION:
            self._fail(AbortReason.PROTOCOL_ERROR,
                       f"protocol version {msg.version}")
        if CIPHER_RSA_PSS_SHA256 not in msg.cipher_suites:
            self._fail(AbortReason.PROTOCOL_ERROR, "no common cipher suite")
        if (msg.service_id, msg.vm_id) not in self._allowed:
            self._fail(AbortReason.UNKNOWN_SERVICE,
                       f"service {msg.service_id} vm {msg.vm_id} not registered")
        self.client_identity = ServiceIdentity(msg.service_id, msg.vm_id, msg.pid)
        self.client_nonce = msg.nonce
        self._fold(msg)
        try:
            self.client_temp = self._services.allocate_temp(self.client_identity)
        except (RegionExhausted, NoFreeSlot):
            self._fail(AbortReason.REGION_EXHAUSTED, "no temp channel available")
        sig = sign_challenge(self._ca.private_key, msg.nonce,
                             _ctx_host_hello(self.session_id,
                                             self.transcript_hash))
        hello = HostHello(self.session_id, self._ca.certificate.to_bytes(),
                          CIPHER_RSA_PSS_SHA256, self.client_temp, sig)
        self._fold(hello)
        self._move(HostPhase.AWAIT_AUTH, "HOST_HELLO")
        return hello

    # -- step 4 -----------------------------------------------------------

    def on_client_auth(self, msg: ClientAuth) -> ServerRequest:
        self._expect_phase(HostPhase.AWAIT_AUTH, msg)
        try:
            cert = Certificate.from_bytes(msg.client_certificate)
        except Exception:
            self._fail(AbortReason.BAD_CERTIFICATE, "unparseable client certificate")
        verdict = verify_certificate(self._ca.certificate, self._allowed, cert)
        if not verdict:
            self._fail(AbortReason.BAD_CERTIFICATE,
                       f"client certificate: {verdict.reason.value}")
        if (cert.service_id, cert.vm_id) != (self.client_identity.service_id,
                                             self.client_identity.vm_id):
            self._fail(AbortReason.BAD_CERTIFICATE,
                       "certificate subject differs from hello identity")
        check = verify_challenge(
            cert.public_key_der, self.client_nonce,
            _ctx_client_auth(self.session_id, self.transcript_hash,
                             msg.target_service_id),
            msg.challenge_signature, replay_cache=self._replay)
        if not check:
            reason = (AbortReason.REPLAY if check.reason is ChallengeReason.REPLAY
                      else AbortReason.BAD_CHALLENGE)
            self._fail(reason, f"client challenge: {check.reason.value}")
        self._client_pub = cert.public_key_der
        self._fold(msg)
        # the client's chain stops here; grants must present this prefix
        self._chain_at_client_auth = self.transcript_hash
        self.target_service_id = msg.target_service_id

        listener = self._services.find_listener(msg.target_service_id)
        if listener is None:
            self._fail(AbortReason.NO_LISTENER,
                       f"service {msg.target_service_id} is not listening")
        if (listener.service_id, listener.vm_id) not in self._allowed:
            self._fail(AbortReason.UNKNOWN_SERVICE, "listener not registered")
        self.server_identity = listener
        try:
            self.server_temp = self._services.allocate_temp(listener)
        except (RegionExhausted, NoFreeSlot):
            self._fail(AbortReason.REGION_EXHAUSTED, "no temp channel available")
        self.server_nonce = Nonce.fresh()
        request = ServerRequest(
            self.session_id, self.client_identity.service_id,
            self.client_identity.vm_id, self.client_identity.pid,
            self.server_nonce, self.server_temp, self.transcript_hash)
        self._fold(request)
        self._move(HostPhase.AWAIT_SERVER, "SERVER_REQUEST")
        return request

    # -- step 6 ------------------------------------------------------------

    def on_server_hello(self, msg: ServerHello) -> tuple[ChannelGrant, ChannelGrant]:
        self._expect_phase(HostPhase.AWAIT_SERVER, msg)
        chain_before_hello = self.transcript_hash
        try:
            cert = Certificate.from_bytes(msg.server_certificate)
        except Exception:
            self._fail(AbortReason.BAD_CERTIFICATE, "unparseable server certificate")
        verdict = verify_certificate(self._ca.certificate, self._allowed, cert)
        if not verdict:
            self._fail(AbortReason.BAD_CERTIFICATE,
                       f"server certificate: {verdict.reason.value}")
        if (cert.service_id, cert.vm_id) != (self.server_identity.service_id,
                                             self.server_identity.vm_id):
            self._fail(AbortReason.BAD_CERTIFICATE,
                       "certificate subject differs from the requested server")
        check = verify_challenge(
            cert.public_key_der, self.server_nonce,
            _ctx_server_hello(self.session_id, chain_before_hello, msg.accept),
            msg.challenge_signature, replay_cache=self._replay)
        if not check:
            reason = (AbortReason.REPLAY if check.reason is ChallengeReason.REPLAY
                      else AbortReason.BAD_CHALLENGE)
            self._fail(reason, f"server challenge: {check.reason.value}")
        if not msg.accept:
            self._fail(AbortReason.REJECTED, "server declined the connection")
        self._fold(msg)

        client, server = self.client_identity, self.server_identity
        try:
            self.data_channel, buffer_size = self._services.allocate_data(
                server, client)
        except (RegionExhausted, NoFreeSlot):
            self._fail(AbortReason.REGION_EXHAUSTED, "no data channel available")
        attestation = self.transcript_hash
        self._services.authorize(
            self.data_channel, {client.pid, server.pid},
            {client.service_id, server.service_id}, attestation)
        grant_client = ChannelGrant(
            self.session_id, self.data_channel, buffer_size,
            server.service_id, server.vm_id, server.pid,
            attestation, self._chain_at_client_auth)
        grant_server = ChannelGrant(
            self.session_id, self.data_channel, buffer_size,
            client.service_id, client.vm_id, client.pid,
            attestation, attestation)
        self._services.establish(self.data_channel, attestation)
        self._move(HostPhase.GRANTED, "CHANNEL_GRANT")
        return grant_client, grant_server

    def handle(self, msg: Message):
        if isinstance(msg, Abort):
            self._move(HostPhase.ABORTED, "ABORT")
            raise HandshakeAborted(msg.reason, msg.detail)
        if isinstance(msg, ClientHello):
            return self.on_client_hello(msg)
        if isinstance(msg, ClientAuth):
            return self.on_client_auth(msg)
        if isinstance(msg, ServerHello):
            return self.on_server_hello(msg)
        self._fail(AbortReason.PROTOCOL_ERROR,
                   f"unexpected {type(msg).__name__} in {self.phase.value}")

    # -- bookkeeping ----------------------------------------------------

    @property
    def temp_channel_ids(self) -> list[int]:
        return [c for c in (self.client_temp, self.server_temp) if c is not None]

    def make_abort(self, reason: AbortReason, detail: str = "") -> Abort:
        if self.phase not in (HostPhase.GRANTED, HostPhase.ABORTED):
            self._move(HostPhase.ABORTED, f"fail:{reason.name}")
        return Abort(self.session_id, reason, detail)

    def _expect_phase(self, phase: HostPhase, msg: Message,
                      check_session: bool = True) -> None:
        if self.phase is not phase:
            self._fail(AbortReason.PROTOCOL_ERROR,
                       f"{type(msg).__name__} in phase {self.phase.value}")
        if check_session and msg.session_id != self.session_id:
            self._fail(AbortReason.PROTOCOL_ERROR, "session id mismatch")

    def _move(self, new: HostPhase, msg_name: str) -> None:
        self._log_transition(self.phase, new, msg_name)
        self.phase = new

    def _fail(self, reason: AbortReason, detail: str = ""):
        if self.phase is not HostPhase.ABORTED:
            self._move(HostPhase.ABORTED, f"fail:{reason.name}")
        self._abort(reason, detail)
