"""Mandatory access gate over the data section.

Models the in-kernel enforcement layer: every map/read/write of a channel
buffer is checked against the channel table and the local policy entries
before any bytes move.  Denial is a verdict, not an exception, so callers
and the attack suite can assert the exact failing clause; ``map`` converts
a denial into :class:`PermissionDenied`.

Denial reasons are evaluated in a fixed order (channel exists -> identity
-> bounds -> establishment) so tests get deterministic verdicts.

A user-space gate cannot stop a process that maps the backing file behind
the library's back; the gate is the modeled kernel boundary, and all
library data paths route through it (see README, "Enforcement honesty").
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, replace
from enum import Enum, IntEnum

from .errors import BadChannel, NotBroker, PermissionDenied
from .region import ChannelState, HOST_CHANNEL, HOST_SERVICE_ID, Region

_EST_STATE_RAW = bytes((int(ChannelState.ESTABLISHED),)) + b"\x00\x00\x00"
_TEMP_STATE_RAW = bytes((int(ChannelState.TEMP),)) + b"\x00\x00\x00"


class AccessKind(IntEnum):
    MAP = 0
    READ = 1
    WRITE = 2


class DenialReason(Enum):
    NO_POLICY = "no-policy"
    UNKNOWN_CHANNEL = "unknown-channel"
    CHANNEL_CLOSED = "channel-closed"
    PID_NOT_ALLOWED = "pid-not-allowed"
    SERVICE_NOT_ALLOWED = "service-not-allowed"
    OUT_OF_BOUNDS = "out-of-bounds"
    NOT_ESTABLISHED = "not-established"


@dataclass(frozen=True)
class AccessRequest:
    caller_pid: int
    caller_service_id: int
    channel_id: int
    offset: int
    length: int
    kind: AccessKind


@dataclass(frozen=True)
class Verdict:
    permitted: bool
    reason: DenialReason | None = None

    def __bool__(self) -> bool:
        return self.permitted


PERMIT = Verdict(True)


def denied(reason: DenialReason) -> Verdict:
    return Verdict(False, reason)


@dataclass(frozen=True)
class PolicyEntry:
    channel_id: int
    allowed_pids: frozenset[int] | None      # None = any (host channel)
    allowed_service_ids: frozenset[int] | None
    authorized: bool = False
    established: bool = False
    attestation: bytes | None = None


class MappedBuffer:
    """View restricted to exactly one channel's byte range.

    Constructed only by :meth:`Gate.map`; slicing the region there makes
    reaching the control section or a neighboring channel impossible by
    construction.  ``check`` is the per-operation probe the transport
    calls before touching bytes; it is deliberately cheap (one state-word
    compare) with a slow path that produces the precise denial reason.
    """

    __slots__ = ("view", "channel_id", "buffer_size", "_gate", "_epoch",
                 "_state_mm", "_state_off", "_ok_states", "_pid", "_service_id")

    def __init__(self, gate: "Gate", view, meta, pid: int, service_id: int):
        self.view = view
        self.channel_id = meta.channel_id
        self.buffer_size = meta.buffer_size
        self._gate = gate
        self._epoch = gate._epoch
        self._state_off, _ = gate._region.channel_state_probe(meta.channel_id)
        self._state_mm = gate._region._mm
        if meta.is_service_channel:
            self._ok_states = (_EST_STATE_RAW,)
        elif meta.channel_id == HOST_CHANNEL:
            self._ok_states = (_EST_STATE_RAW,)
        else:
            self._ok_states = (_TEMP_STATE_RAW,)
        self._pid = pid
        self._service_id = service_id

    def check(self, kind: AccessKind, offset: int, length: int) -> None:
        so = self._state_off
        if (self._gate._epoch == self._epoch
                and self._state_mm[so:so + 4] in self._ok_states):
            return
        verdict = self._gate.check(AccessRequest(
            self._pid, self._service_id, self.channel_id, offset, length, kind))
        if not verdict:
            raise PermissionDenied(verdict.reason,
                                   f"channel {self.channel_id} {kind.name}")
        # policy changed under us but this access is still permitted
        # (e.g. an unrelated entry was dropped); resync the fast path
        self._epoch = self._gate._epoch

    def release(self) -> None:
        self.view.release()


class Gate:
    """Per-process policy table plus the check/map/mark operations.

    The channel table in shared memory is the persistent source of truth;
    local entries add the authorized/established flags that the handshake
    controls.  The broker's gate additionally mirrors establishment into
    the shared channel state, which endpoint gates then observe.
    """

    def __init__(self, region: Region, *, registered_services: set[int],
                 broker: bool = False):
        self._region = region
        self._registered = frozenset(registered_services) | {HOST_SERVICE_ID}
        self._broker = broker
        self._self_pid = os.getpid()
        self._entries: dict[int, PolicyEntry] = {}
        self._write_lock = threading.Lock()
        self._torn_down = False
        self._epoch = 0
        # host channel is open to every registered service from boot
        self._entries[HOST_CHANNEL] = PolicyEntry(
            HOST_CHANNEL, allowed_pids=None, allowed_service_ids=None,
            authorized=True, established=True)

    @property
    def region(self) -> Region:
        return self._region

    # -- verdicts -------------------------------------------------------

    def check(self, req: AccessRequest) -> Verdict:
        if self._torn_down:
            return denied(DenialReason.NO_POLICY)
        if not 0 <= req.channel_id < self._region.max_channels:
            return denied(DenialReason.UNKNOWN_CHANNEL)
        meta = self._region.read_meta(req.channel_id)
        if meta.state == ChannelState.FREE:
            return denied(DenialReason.UNKNOWN_CHANNEL)
        if meta.state == ChannelState.CLOSED:
            return denied(DenialReason.CHANNEL_CLOSED)

        entry = self._entries.get(req.channel_id)
        if not (self._broker and req.caller_pid == self._self_pid):
            if req.channel_id == HOST_CHANNEL:
                if req.caller_service_id not in self._registered:
                    return denied(DenialReason.SERVICE_NOT_ALLOWED)
            else:
                pids = meta.endpoint_pids
                if entry is not None and entry.allowed_pids is not None:
                    pids = pids | entry.allowed_pids
                if req.caller_pid not in pids:
                    return denied(DenialReason.PID_NOT_ALLOWED)
                if req.caller_service_id not in meta.endpoint_service_ids:
                    return denied(DenialReason.SERVICE_NOT_ALLOWED)

        if (req.length <= 0 or req.offset < 0
                or req.offset + req.length > meta.buffer_size):
            return denied(DenialReason.OUT_OF_BOUNDS)

        if req.kind in (AccessKind.READ, AccessKind.WRITE) and meta.is_service_channel:
            if meta.state != ChannelState.ESTABLISHED:
                return denied(DenialReason.NOT_ESTABLISHED)
            if entry is None or not entry.established:
                return denied(DenialReason.NOT_ESTABLISHED)
        return PERMIT

    # -- data access ------------------------------------------------------

    def map(self, channel_id: int, *, caller_pid: int | None = None,
            caller_service_id: int = HOST_SERVICE_ID) -> MappedBuffer:
        pid = os.getpid() if caller_pid is None else caller_pid
        meta = self._region.read_meta(channel_id) \
            if 0 <= channel_id < self._region.max_channels else None
        length = meta.buffer_size if meta is not None else 1
        verdict = self.check(AccessRequest(
            pid, caller_service_id, channel_id, 0, length, AccessKind.MAP))
        if not verdict:
            raise PermissionDenied(verdict.reason, f"map channel {channel_id}")
        view = self._region._data_view(meta.buffer_offset, meta.buffer_size)
        return MappedBuffer(self, view, meta, pid, caller_service_id)

    # -- policy mutation ---------------------------------------------------

    def mark_authorized(self, channel_id: int, pids, service_ids,
                        attestation: bytes | None = None) -> None:
        if not self._broker:
            raise NotBroker("only the broker populates the policy table")
        with self._write_lock:
            self._entries[channel_id] = PolicyEntry(
                channel_id, frozenset(pids), frozenset(service_ids),
                authorized=True, established=False, attestation=attestation)

    def install_grant(self, channel_id: int, pids, service_ids,
                      attestation: bytes) -> None:
        """Endpoint-side entry creation from a channel grant.

        The shared channel table still bounds what this can permit; a
        fabricated grant cannot widen access beyond the broker-written
        metadata.
        """
        with self._write_lock:
            self._entries[channel_id] = PolicyEntry(
                channel_id, frozenset(pids), frozenset(service_ids),
                authorized=True, established=False, attestation=attestation)

    def mark_established(self, channel_id: int, attestation: bytes) -> None:
        with self._write_lock:
            entry = self._entries.get(channel_id)
            if entry is None or not entry.authorized:
                raise PermissionDenied(DenialReason.NOT_ESTABLISHED,
                                       "channel was never authorized")
            if entry.attestation is not None and entry.attestation != attestation:
                raise PermissionDenied(DenialReason.NOT_ESTABLISHED,
                                       "attestation token mismatch")
            self._entries[channel_id] = replace(entry, established=True,
                                                attestation=attestation)
        if self._broker:
            self._region.set_channel_state(channel_id, ChannelState.ESTABLISHED)

    def drop_entry(self, channel_id: int) -> None:
        with self._write_lock:
            self._entries.pop(channel_id, None)
            self._epoch += 1

    def teardown(self) -> None:
        """Clear all policy; every subsequent check is denied."""
        with self._write_lock:
            self._entries.clear()
            self._torn_down = True
            self._epoch += 1

    @property
    def torn_down(self) -> bool:
        return self._torn_down

    def entry(self, channel_id: int) -> PolicyEntry | None:
        return self._entries.get(channel_id)


def reference_check(region: Region, registered: set[int], entries,
                    req: AccessRequest, *, broker_pid: int | None = None) -> Verdict:
    """Brute-force re-derivation of the gate predicate from raw bytes.

    Independent of :meth:`Gate.check`; used by tests as the oracle side of
    the dual-route verification.  Re-reads the raw control bytes rather
    than the Gate's snapshots.
    """
    from .region import ENTRY_FMT, ENTRY_TABLE_OFFSET, ENTRY_SIZE

    if entries is None:
        return denied(DenialReason.NO_POLICY)
    if req.channel_id < 0 or req.channel_id >= region.max_channels:
        return denied(DenialReason.UNKNOWN_CHANNEL)
    raw = bytes(region._mm[ENTRY_TABLE_OFFSET + req.channel_id * ENTRY_SIZE:
                           ENTRY_TABLE_OFFSET + (req.channel_id + 1) * ENTRY_SIZE])
    fields = ENTRY_FMT.unpack(raw)
    (_cid, state, ssid, csid, _svid, _cvid, spid, cpid, _boff, bsize, _r) = fields
    if state == int(ChannelState.FREE):
        return denied(DenialReason.UNKNOWN_CHANNEL)
    if state == int(ChannelState.CLOSED):
        return denied(DenialReason.CHANNEL_CLOSED)
    is_broker_self = broker_pid is not None and req.caller_pid == broker_pid
    if not is_broker_self:
        if req.channel_id == HOST_CHANNEL:
            if req.caller_service_id not in (set(registered) | {HOST_SERVICE_ID}):
                return denied(DenialReason.SERVICE_NOT_ALLOWED)
        else:
            pids = {p for p in (spid, cpid) if p}
            extra = entries.get(req.channel_id)
            if extra is not None and extra.allowed_pids is not None:
                pids |= set(extra.allowed_pids)
            if req.caller_pid not in pids:
                return denied(DenialReason.PID_NOT_ALLOWED)
            if req.caller_service_id not in (ssid, csid):
                return denied(DenialReason.SERVICE_NOT_ALLOWED)
    if req.length <= 0 or req.offset < 0 or req.offset + req.length > bsize:
        return denied(DenialReason.OUT_OF_BOUNDS)
    service_channel = (req.channel_id != HOST_CHANNEL
                       and ssid != HOST_SERVICE_ID and csid != HOST_SERVICE_ID)
    if req.kind in (AccessKind.READ, AccessKind.WRITE) and service_channel:
        if state != int(ChannelState.ESTABLISHED):
            return denied(DenialReason.NOT_ESTABLISHED)
        extra = entries.get(req.channel_id)
        if extra is None or not extra.established:
            return denied(DenialReason.NOT_ESTABLISHED)
    return PERMIT
