"""Socket-style facade: listen / connect / send / receive.

Endpoints load their provisioned credentials, open the shared region
read-only, and run the handshake over the host channel plus a temporary
channel.  A completed handshake yields an :class:`EstablishedChannel`
whose send and receive sides own one ring each, so both directions may be
used concurrently from different threads.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from pathlib import Path

from . import transport
from .errors import (
    BrokerUnreachable,
    ChannelClosed,
    HandshakeAborted,
    LockTimeout,
    PermissionDenied,
    ShmGuardError,
    TransportTimeout,
)
from .gate import DenialReason, Gate
from .handshake import (
    ClientSession,
    ServerSession,
    ServiceIdentity,
    make_register,
)
from .pki import (
    AllowedServiceList,
    Certificate,
    cert_filename,
    key_filename,
    load_allowed_list,
    load_ca_certificate,
    load_private_key,
)
from .region import ChannelState, HOST_CHANNEL, Region, region_path_from_env
from .wire import (
    Abort,
    AbortReason,
    ChannelGrant,
    HostHello,
    RegisterAck,
    ServerRequest,
    decode,
)

_CTRL_PROFILE = transport.RingProfile.anticipation(window=0.0005)
DEFAULT_PROFILE = transport.RingProfile.anticipation()


@dataclass(frozen=True)
class Credentials:
    identity: ServiceIdentity
    private_key: object
    certificate: Certificate
    ca_certificate: Certificate
    allowed: AllowedServiceList

    @classmethod
    def load(cls, directory, service_id: int, vm_id: int) -> "Credentials":
        directory = Path(directory)
        return cls(
            identity=ServiceIdentity(service_id, vm_id, os.getpid()),
            private_key=load_private_key(directory / key_filename(service_id, vm_id)),
            certificate=Certificate.from_bytes(
                (directory / cert_filename(service_id, vm_id)).read_bytes()),
            ca_certificate=load_ca_certificate(directory),
            allowed=load_allowed_list(directory),
        )


class EstablishedChannel:
    """An authenticated, gate-checked duplex channel."""

    def __init__(self, channel_id: int, peer: ServiceIdentity, buf,
                 producer: transport.ProducerEnd,
                 consumer: transport.ConsumerEnd):
        self.channel_id = channel_id
        self.peer = peer
        self._buf = buf
        self.producer = producer
        self.consumer = consumer
        self.max_frame = producer.max_frame

    def send(self, payload, timeout: float | None = None) -> None:
        try:
            self.producer.send(payload, timeout=timeout)
        except PermissionDenied as exc:
            if exc.reason is DenialReason.CHANNEL_CLOSED:
                raise ChannelClosed(str(exc)) from exc
            raise

    def receive(self, timeout: float | None = None) -> bytes:
        try:
            return self.consumer.receive(timeout=timeout)
        except PermissionDenied as exc:
            if exc.reason is DenialReason.CHANNEL_CLOSED:
                raise ChannelClosed(str(exc)) from exc
            raise

    def close(self) -> None:
        self.producer.close()
        self.consumer.close()
        self._buf.release()


class _Endpoint:
    """Shared plumbing: region + gate + host-channel exchanges."""

    def __init__(self, credentials_path, service_id: int, vm_id: int,
                 region_path=None):
        self.creds = Credentials.load(credentials_path, service_id, vm_id)
        path = Path(region_path) if region_path else region_path_from_env()
        self.region = Region.open(path)
        self.gate = Gate(self.region,
                         registered_services=self.creds.allowed.service_ids())

    @property
    def identity(self) -> ServiceIdentity:
        return self.creds.identity

    def close(self) -> None:
        self.region.close()

    # -- host-channel exchange -------------------------------------------

    def hello_exchange(self, message, want_types, session_id: int,
                       timeout: float):
        """Serialize on the hello lock, send one message on channel 0, and
        wait for the matching reply; stale frames from dead peers are
        drained first and skipped while waiting."""
        deadline = time.monotonic() + timeout
        try:
            lock = self.region.hello_lock(timeout)
        except LockTimeout as exc:
            raise BrokerUnreachable("host channel is wedged") from exc
        with lock:
            buf = self.gate.map(HOST_CHANNEL,
                                caller_service_id=self.identity.service_id)
            bells0 = transport.RingBells.for_ring(self.region.path, HOST_CHANNEL, 0)
            bells1 = transport.RingBells.for_ring(self.region.path, HOST_CHANNEL, 1)
            producer = transport.attach_producer(
                buf.view, buf.buffer_size, 0, bells0, _CTRL_PROFILE,
                checker=buf.check)
            consumer = transport.attach_consumer(
                buf.view, buf.buffer_size, 1, bells1, _CTRL_PROFILE,
                checker=buf.check)
            try:
                while consumer.try_receive() is not None:
                    pass
                producer.send(message.encode())
                while True:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise BrokerUnreachable(
                            "no broker reply on the host channel")
                    try:
                        frame = consumer.receive(timeout=remaining)
                    except TransportTimeout:
                        raise BrokerUnreachable(
                            "no broker reply on the host channel")
                    msg = decode(frame)
                    if msg.session_id != session_id:
                        continue
                    if isinstance(msg, Abort):
                        raise HandshakeAborted(msg.reason, msg.detail)
                    if isinstance(msg, want_types):
                        return msg
            finally:
                producer.close()
                consumer.close()
                buf.release()

    def attach_guest_side(self, channel_id: int) -> "_GuestIO":
        """Guest end of a control channel: produces ring 0, consumes ring 1."""
        buf = self.gate.map(channel_id,
                            caller_service_id=self.identity.service_id)
        bells0 = transport.RingBells.for_ring(self.region.path, channel_id, 0)
        bells1 = transport.RingBells.for_ring(self.region.path, channel_id, 1)
        return _GuestIO(
            buf,
            transport.attach_producer(buf.view, buf.buffer_size, 0, bells0,
                                      _CTRL_PROFILE, checker=buf.check),
            transport.attach_consumer(buf.view, buf.buffer_size, 1, bells1,
                                      _CTRL_PROFILE, checker=buf.check))

    def finalize(self, session, grant: ChannelGrant, role: str,
                 profile: transport.RingProfile) -> EstablishedChannel:
        """Install the grant, mark establishment, and wire the rings.

        Clients produce ring 0 and consume ring 1; servers the reverse.
        """
        attestation = session.accept_grant(grant)
        peer = ServiceIdentity(grant.peer_service_id, grant.peer_vm_id,
                               grant.peer_pid)
        me = self.identity
        self.gate.install_grant(
            grant.channel_id, {me.pid, peer.pid},
            {me.service_id, peer.service_id}, attestation)
        self.gate.mark_established(grant.channel_id, attestation)
        buf = self.gate.map(grant.channel_id, caller_service_id=me.service_id)
        prod_ring, cons_ring = (0, 1) if role == "client" else (1, 0)
        bells_p = transport.RingBells.for_ring(self.region.path,
                                               grant.channel_id, prod_ring)
        bells_c = transport.RingBells.for_ring(self.region.path,
                                               grant.channel_id, cons_ring)
        producer = transport.attach_producer(
            buf.view, buf.buffer_size, prod_ring, bells_p, profile,
            checker=buf.check)
        consumer = transport.attach_consumer(
            buf.view, buf.buffer_size, cons_ring, bells_c, profile,
            checker=buf.check)
        return EstablishedChannel(grant.channel_id, peer, buf, producer,
                                  consumer)


class _GuestIO:
    def __init__(self, buf, producer, consumer):
        self.buf = buf
        self.producer = producer
        self.consumer = consumer

    def close(self) -> None:
        self.producer.close()
        self.consumer.close()
        self.buf.release()


def connect(vm_id: int, service_id: int, target_service_id: int,
            credentials_path, timeout: float = 10.0, region_path=None,
            profile: transport.RingProfile = DEFAULT_PROFILE) -> EstablishedChannel:
    """Run the client side of the handshake; returns the granted channel."""
    endpoint = _Endpoint(credentials_path, service_id, vm_id, region_path)
    deadline = time.monotonic() + timeout
    try:
        session = ClientSession(endpoint.identity, endpoint.creds.private_key,
                                endpoint.creds.certificate,
                                endpoint.creds.ca_certificate,
                                endpoint.creds.allowed, target_service_id)
        hello = session.start()
        host_hello = endpoint.hello_exchange(
            hello, HostHello, session.session_id,
            min(timeout, max(0.05, deadline - time.monotonic())))
        auth = session.on_host_hello(host_hello)

        io = endpoint.attach_guest_side(session.temp_channel_id)
        try:
            io.producer.send(auth.encode())
            remaining = max(0.05, deadline - time.monotonic())
            frame = io.consumer.receive(timeout=remaining)
            msg = decode(frame)
            if isinstance(msg, Abort):
                raise HandshakeAborted(msg.reason, msg.detail)
            if not isinstance(msg, ChannelGrant):
                raise HandshakeAborted(AbortReason.PROTOCOL_ERROR,
                                       f"expected a grant, got "
                                       f"{type(msg).__name__}")
            return endpoint.finalize(session, msg, "client", profile)
        finally:
            io.close()
    except TransportTimeout as exc:
        endpoint.close()
        raise HandshakeAborted(AbortReason.TIMEOUT, str(exc)) from exc
    except ShmGuardError:
        endpoint.close()
        raise
    except BaseException:
        endpoint.close()
        raise


class Listener:
    """Accepts handshakes targeted at this service.

    Registration announces (service, vm, pid) to the broker; sessions are
    then discovered by scanning the channel table for TEMP channels naming
    this listener, with the per-service doorbell as the wakeup hint.
    """

    def __init__(self, vm_id: int, service_id: int, credentials_path,
                 region_path=None, accept=None,
                 profile: transport.RingProfile = DEFAULT_PROFILE,
                 register_timeout: float = 5.0):
        self._endpoint = _Endpoint(credentials_path, service_id, vm_id,
                                   region_path)
        self._accept_fn = accept
        self._profile = profile
        self._handled: set[int] = set()
        self._closed = False
        ack = self._endpoint.hello_exchange(
            make_register(self.identity, self._endpoint.creds.private_key),
            RegisterAck, 0, register_timeout)
        if not ack.ok:
            raise HandshakeAborted(AbortReason.UNKNOWN_SERVICE,
                                   "broker refused the registration")
        self._bell = transport.Doorbell(transport.service_bell_path(
            self._endpoint.region.path, service_id, vm_id))

    @property
    def identity(self) -> ServiceIdentity:
        return self._endpoint.identity

    def accept(self, timeout: float | None = None) -> EstablishedChannel:
        """Serve handshakes until one yields a channel (rejected or failed
        sessions are absorbed and the wait continues)."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            cid = self._find_pending()
            if cid is not None:
                channel = self._serve(cid)
                if channel is not None:
                    return channel
                continue
            if deadline is not None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TransportTimeout("no handshake before deadline")
                self._bell.wait(min(remaining, 0.05))
            else:
                self._bell.wait(0.05)
            self._bell.drain()

    def _find_pending(self) -> int | None:
        me = self.identity
        for meta in self._endpoint.region.iter_channels():
            if (meta.state == ChannelState.TEMP
                    and meta.channel_id not in self._handled
                    and meta.server_service_id == me.service_id
                    and meta.server_pid == me.pid):
                return meta.channel_id
        return None

    def _serve(self, channel_id: int) -> EstablishedChannel | None:
        self._handled.add(channel_id)
        ep = self._endpoint
        session = ServerSession(self.identity, ep.creds.private_key,
                                ep.creds.certificate, ep.creds.ca_certificate,
                                ep.creds.allowed, accept_fn=self._accept_fn)
        try:
            io = ep.attach_guest_side(channel_id)
        except PermissionDenied:
            return None   # channel vanished between scan and attach
        try:
            frame = io.consumer.receive(timeout=2.0)
            msg = decode(frame)
            if not isinstance(msg, ServerRequest):
                return None
            reply = session.on_request(msg)
            io.producer.send(reply.encode())
            if not reply.accept:
                return None
            frame = io.consumer.receive(timeout=2.0)
            msg = decode(frame)
            if isinstance(msg, Abort):
                return None
            if not isinstance(msg, ChannelGrant):
                return None
            return ep.finalize(session, msg, "server", self._profile)
        except (TransportTimeout, PermissionDenied, ChannelClosed,
                HandshakeAborted):
            return None
        finally:
            io.close()

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._bell.close()
            self._endpoint.close()


def listen(vm_id: int, service_id: int, credentials_path,
           region_path=None, **kwargs) -> Listener:
    return Listener(vm_id, service_id, credentials_path, region_path, **kwargs)
