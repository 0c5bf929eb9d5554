"""The trusted-host daemon.

Owns the region, runs the CA, populates the policy table, and drives the
host side of every handshake.  Listener registrations and client hellos
arrive on the host channel (channel 0); each accepted session then moves
to a temporary channel and runs in its own thread until a data channel is
granted or the session aborts.

The broker is the only writer of the control section; endpoints interact
with it purely through the shared region and the published credential
files.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from . import transport
from .errors import (
    DuplicateIdentity,
    HandshakeAborted,
    IOFailure,
    ShmGuardError,
    TransportTimeout,
)
from .gate import Gate
from .handshake import HostSession, ServiceIdentity, register_context
from .pki import (
    AllowedServiceList,
    CertificateAuthority,
    ReplayCache,
    verify_challenge,
    write_credentials,
)
from .region import (
    ChannelMeta,
    ChannelState,
    HOST_CHANNEL,
    Region,
    RegionConfig,
)
from .wire import (
    Abort,
    AbortReason,
    ClientHello,
    Register,
    RegisterAck,
    decode,
)

log = logging.getLogger("shmguard.broker")

DEFAULT_TEMP_CHANNEL_SIZE = 64 * 1024
SESSION_PHASE_TIMEOUT = 2.0

_CTRL_PROFILE = transport.RingProfile.anticipation(window=0.0005)


@dataclass(frozen=True)
class RegistryEntry:
    service_id: int
    vm_id: int
    name: str = ""


def parse_registry(path) -> list[RegistryEntry]:
    """One ``service_id,vm_id,name`` triple per line; '#' starts a comment."""
    entries = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) < 2:
            raise IOFailure(f"malformed registry line: {raw!r}")
        name = parts[2] if len(parts) > 2 else ""
        entries.append(RegistryEntry(int(parts[0]), int(parts[1]), name))
    return entries


class PkiMaterial:
    """Pre-generated CA plus issued service keypairs (reusable across boots)."""

    def __init__(self, ca: CertificateAuthority, allowed: AllowedServiceList,
                 issued: dict):
        self.ca = ca
        self.allowed = allowed
        self.issued = issued

    @classmethod
    def generate(cls, registry) -> "PkiMaterial":
        ca = CertificateAuthority.generate()
        allowed = AllowedServiceList()
        # the host itself is a listed identity so endpoints can validate
        # the host certificate with the ordinary verification path
        allowed.add(0, 0, ca.certificate.public_key_der)
        issued = {}
        seen = set()
        for entry in registry:
            key = (entry.service_id, entry.vm_id)
            if key in seen:
                raise DuplicateIdentity(f"{key} registered twice")
            seen.add(key)
            priv, cert = ca.issue(entry.service_id, entry.vm_id)
            allowed.add(entry.service_id, entry.vm_id, cert.public_key_der)
            issued[key] = (priv, cert)
        return cls(ca, allowed, issued)


class Broker:
    def __init__(self, region: Region, gate: Gate, pki: PkiMaterial,
                 credentials_dir: Path, *, temp_channel_size: int,
                 default_channel_size: int, phase_timeout: float):
        self.region = region
        self.gate = gate
        self.pki = pki
        self.credentials_dir = Path(credentials_dir)
        self.temp_channel_size = temp_channel_size
        self.default_channel_size = default_channel_size
        self.phase_timeout = phase_timeout
        self.replay_cache = ReplayCache()
        self.identity = ServiceIdentity(0, 0, _pid())
        self._listeners: dict[int, ServiceIdentity] = {}
        self._listeners_lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._serve_thread: threading.Thread | None = None
        self._alloc_lock = threading.Lock()

    # -- boot -------------------------------------------------------------

    @classmethod
    def boot(cls, region_path, registry, *, credentials_dir=None,
             region_config: RegionConfig | None = None,
             pki: PkiMaterial | None = None, adopt: bool = False,
             temp_channel_size: int = DEFAULT_TEMP_CHANNEL_SIZE,
             phase_timeout: float = SESSION_PHASE_TIMEOUT) -> "Broker":
        region_path = Path(region_path)
        config = region_config or RegionConfig()
        if adopt and region_path.exists():
            region = Region.adopt(region_path)
        else:
            region = Region.create(config, region_path)
        credentials_dir = Path(credentials_dir
                               if credentials_dir is not None
                               else f"{region_path}.creds")
        if pki is None:
            pki = PkiMaterial.generate(registry)
        write_credentials(credentials_dir, pki.ca, pki.allowed, pki.issued)

        gate = Gate(region, registered_services=pki.allowed.service_ids(),
                    broker=True)
        transport.create_channel_bells(region_path, HOST_CHANNEL)
        host_meta = region.read_meta(HOST_CHANNEL)
        host_buf = gate.map(HOST_CHANNEL)
        transport.init_channel_rings(host_buf.view, host_meta.buffer_size)
        host_buf.release()

        broker = cls(region, gate, pki, credentials_dir,
                     temp_channel_size=temp_channel_size,
                     default_channel_size=config.default_channel_size,
                     phase_timeout=phase_timeout)
        log.info("broker up: region=%s services=%d", region_path,
                 len(pki.issued))
        return broker

    # -- serve loop -----------------------------------------------------

    def start(self) -> "Broker":
        self._serve_thread = threading.Thread(target=self.serve,
                                              name="broker-serve", daemon=True)
        self._serve_thread.start()
        return self

    def serve(self) -> None:
        host_buf = self.gate.map(HOST_CHANNEL)
        bells0 = transport.RingBells.for_ring(self.region.path, HOST_CHANNEL, 0)
        bells1 = transport.RingBells.for_ring(self.region.path, HOST_CHANNEL, 1)
        consumer = transport.attach_consumer(
            host_buf.view, host_buf.buffer_size, 0, bells0, _CTRL_PROFILE,
            checker=host_buf.check)
        producer = transport.attach_producer(
            host_buf.view, host_buf.buffer_size, 1, bells1, _CTRL_PROFILE,
            checker=host_buf.check)
        try:
            while not self._stop.is_set():
                try:
                    frame = consumer.receive(timeout=0.05)
                except TransportTimeout:
                    continue
                try:
                    msg = decode(frame)
                except ShmGuardError:
                    log.warning("undecodable frame on host channel")
                    continue
                if isinstance(msg, Register):
                    producer.send(self._handle_register(msg).encode())
                elif isinstance(msg, ClientHello):
                    reply = self._begin_session(msg)
                    producer.send(reply.encode())
                else:
                    log.warning("unexpected %s on host channel",
                                type(msg).__name__)
        finally:
            consumer.close()
            producer.close()
            host_buf.release()

    def shutdown(self) -> None:
        """Close every non-host channel, clear policy, keep the file."""
        self._stop.set()
        if self._serve_thread is not None:
            self._serve_thread.join(timeout=2.0)
        for t in self._threads:
            t.join(timeout=2.0)
        for meta in self.region.iter_channels():
            if meta.channel_id == HOST_CHANNEL:
                continue
            if meta.state in (ChannelState.TEMP, ChannelState.AUTHORIZED,
                              ChannelState.ESTABLISHED):
                self.release(meta.channel_id)
        self.gate.teardown()
        self.region.close()
        log.info("broker down: region retained at %s", self.region.path)

    # -- host-channel dispatch ---------------------------------------------

    def _handle_register(self, msg: Register) -> RegisterAck:
        listed = self.pki.allowed.lookup(msg.service_id, msg.vm_id)
        if listed is None:
            log.warning("register from unknown service %d/%d",
                        msg.service_id, msg.vm_id)
            return RegisterAck(False)
        check = verify_challenge(
            listed, msg.nonce,
            register_context(msg.service_id, msg.vm_id, msg.pid),
            msg.signature, replay_cache=self.replay_cache)
        if not check:
            log.warning("register signature rejected for %d/%d: %s",
                        msg.service_id, msg.vm_id, check.reason.value)
            return RegisterAck(False)
        identity = ServiceIdentity(msg.service_id, msg.vm_id, msg.pid)
        with self._listeners_lock:
            self._listeners[msg.service_id] = identity
        transport.create_bell(transport.service_bell_path(
            self.region.path, msg.service_id, msg.vm_id))
        log.info("listener registered: %s", identity)
        return RegisterAck(True)

    def _begin_session(self, hello: ClientHello):
        """Step 2 inline (client is waiting on the host channel), then hand
        the session to its own thread."""
        session = HostSession(self, self.pki.ca, self.pki.allowed,
                              self.replay_cache)
        try:
            reply = session.on_client_hello(hello)
        except HandshakeAborted as exc:
            self._cleanup_session(session)
            return session.make_abort(exc.reason, str(exc))
        thread = threading.Thread(target=self._run_session, args=(session,),
                                  name=f"session-{session.session_id:08x}",
                                  daemon=True)
        self._threads.append(thread)
        thread.start()
        return reply

    def _run_session(self, session: HostSession) -> None:
        client_io = server_io = None
        try:
            client_io = self._attach_host_side(session.client_temp)
            msg = self._await(client_io, session, self.phase_timeout)
            request = session.on_client_auth(msg)

            server_io = self._attach_host_side(session.server_temp)
            server_io.producer.send(request.encode())
            listener = session.server_identity
            transport.Doorbell(transport.service_bell_path(
                self.region.path, listener.service_id, listener.vm_id)).signal()

            msg = self._await(server_io, session, self.phase_timeout)
            grant_client, grant_server = session.on_server_hello(msg)
            client_io.producer.send(grant_client.encode())
            server_io.producer.send(grant_server.encode())
            # temp channels are zeroed on release; let the endpoints take
            # their grants out first
            for io in (client_io, server_io):
                try:
                    io.producer.wait_drained(timeout=self.phase_timeout)
                except TransportTimeout:
                    pass
            log.info("session %016x granted channel %d",
                     session.session_id, session.data_channel)
        except HandshakeAborted as exc:
            abort = session.make_abort(exc.reason, str(exc))
            for io in (client_io, server_io):
                if io is not None:
                    try:
                        io.producer.send(abort.encode(), timeout=0.2)
                        io.producer.wait_drained(timeout=0.5)
                    except ShmGuardError:
                        pass
            log.info("session %016x aborted: %s", session.session_id,
                     exc.reason.value if hasattr(exc.reason, "value") else exc.reason)
        except ShmGuardError as exc:
            log.warning("session %016x failed: %s", session.session_id, exc)
        finally:
            self._cleanup_session(session)
            for io in (client_io, server_io):
                if io is not None:
                    io.close()

    def _await(self, io, session, timeout: float):
        try:
            frame = io.consumer.receive(timeout=timeout)
        except TransportTimeout:
            raise HandshakeAborted(AbortReason.TIMEOUT,
                                   "peer silent past phase timeout")
        msg = decode(frame)
        if isinstance(msg, Abort):
            raise HandshakeAborted(msg.reason, msg.detail)
        return msg

    def _cleanup_session(self, session: HostSession) -> None:
        for cid in session.temp_channel_ids:
            try:
                self.release(cid)
            except ShmGuardError:
                pass

    def _attach_host_side(self, channel_id: int) -> "_ChannelIO":
        """Broker end of a temp channel: consumes ring 0, produces ring 1."""
        buf = self.gate.map(channel_id)
        bells0 = transport.RingBells.for_ring(self.region.path, channel_id, 0)
        bells1 = transport.RingBells.for_ring(self.region.path, channel_id, 1)
        return _ChannelIO(
            buf,
            transport.attach_consumer(buf.view, buf.buffer_size, 0, bells0,
                                      _CTRL_PROFILE, checker=buf.check),
            transport.attach_producer(buf.view, buf.buffer_size, 1, bells1,
                                      _CTRL_PROFILE, checker=buf.check))

    # -- HostServices port (used by HostSession) ---------------------------

    def allocate_temp(self, peer: ServiceIdentity) -> int:
        with self._alloc_lock:
            meta = ChannelMeta(
                channel_id=0, state=ChannelState.TEMP,
                server_service_id=peer.service_id, server_vm_id=peer.vm_id,
                server_pid=peer.pid, client_service_id=0, client_vm_id=0,
                client_pid=self.identity.pid)
            cid = self.region.allocate_channel(meta, self.temp_channel_size)
        self._wire_channel(cid)
        return cid

    def allocate_data(self, server: ServiceIdentity,
                      client: ServiceIdentity) -> tuple[int, int]:
        with self._alloc_lock:
            meta = ChannelMeta(
                channel_id=0, state=ChannelState.AUTHORIZED,
                server_service_id=server.service_id, server_vm_id=server.vm_id,
                server_pid=server.pid, client_service_id=client.service_id,
                client_vm_id=client.vm_id, client_pid=client.pid)
            cid = self.region.allocate_channel(meta, self.default_channel_size)
        self._wire_channel(cid)
        return cid, self.default_channel_size

    def _wire_channel(self, channel_id: int) -> None:
        transport.create_channel_bells(self.region.path, channel_id)
        buf = self.gate.map(channel_id)
        transport.init_channel_rings(buf.view, buf.buffer_size)
        buf.release()

    def release(self, channel_id: int) -> None:
        self.region.release_channel(channel_id)
        transport.unlink_channel_bells(self.region.path, channel_id)
        self.gate.drop_entry(channel_id)

    def authorize(self, channel_id: int, pids, service_ids,
                  attestation: bytes) -> None:
        self.gate.mark_authorized(channel_id, pids, service_ids,
                                  attestation=attestation)

    def establish(self, channel_id: int, attestation: bytes) -> None:
        self.gate.mark_established(channel_id, attestation)

    def find_listener(self, target_service_id: int) -> ServiceIdentity | None:
        with self._listeners_lock:
            return self._listeners.get(target_service_id)


class _ChannelIO:
    def __init__(self, buf, consumer, producer):
        self.buf = buf
        self.consumer = consumer
        self.producer = producer

    def close(self) -> None:
        self.consumer.close()
        self.producer.close()
        self.buf.release()


def _pid() -> int:
    import os
    return os.getpid()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="broker",
        description="Trusted-host daemon: owns the shared region, issues "
                    "credentials, and brokers authenticated channels.")
    parser.add_argument("--region", required=True, help="backing file path")
    parser.add_argument("--registry", required=True,
                        help="service registry: one service_id,vm_id,name per line")
    parser.add_argument("--max-channels", type=int, default=64)
    parser.add_argument("--channel-size", type=int, default=512 * 1024,
                        help="default data-channel buffer size in bytes")
    parser.add_argument("--region-size", type=int, default=16 * 1024 * 1024)
    parser.add_argument("--credentials", default=None,
                        help="directory for published credentials "
                             "(default: <region>.creds)")
    parser.add_argument("--adopt", action="store_true",
                        help="reuse an existing region file after a crash")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")

    registry = parse_registry(args.registry)
    config = RegionConfig(total_size=args.region_size,
                          max_channels=args.max_channels,
                          default_channel_size=args.channel_size)
    broker = Broker.boot(args.region, registry, region_config=config,
                         credentials_dir=args.credentials, adopt=args.adopt)

    stop = threading.Event()

    def _on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, _on_signal)
    signal.signal(signal.SIGINT, _on_signal)

    broker.start()
    print(f"READY region={broker.region.path} "
          f"credentials={broker.credentials_dir}", flush=True)
    while not stop.is_set():
        time.sleep(0.1)
    broker.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
