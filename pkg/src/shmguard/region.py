"""Shared-memory region layout and the broker-side channel allocator.

The region is a single memory-mapped file shared by every participating
process.  It starts with a fixed-size Control Section (header + channel
table) followed by the Data Section, which is carved into per-channel
buffers by a bump allocator.  Only a broker handle may write the control
section; every other process opens the region read-only at this layer and
reaches channel buffers exclusively through the access gate.

Byte layout (little-endian throughout) is frozen and documented in
docs/region-format.md; tests compare it against a golden hexdump.
"""

from __future__ import annotations

import fcntl
import mmap
import os
import secrets
import struct
import threading
import time
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path

from .errors import (
    BadChannel,
    BadMagic,
    InvalidConfig,
    IOFailure,
    LockTimeout,
    NoFreeSlot,
    NotBroker,
    RegionExhausted,
    VersionMismatch,
)

MAGIC = 0x53495648
VERSION = 1

HEADER_SIZE = 32
HEADER_FMT = struct.Struct("<IHHIIQII")
# magic, version, header_size, lock_word, control_size,
# next_free_offset, active_channel_count, max_channels

ENTRY_SIZE = 64
ENTRY_TABLE_OFFSET = HEADER_SIZE
ENTRY_FMT = struct.Struct("<IIIIIIQQQQQ")
# channel_id, state, server_service_id, client_service_id,
# server_vm_id, client_vm_id, server_pid, client_pid,
# buffer_offset, buffer_size, reserved

LOCK_WORD_OFFSET = 8
BUFFER_ALIGN = 4096

# fcntl byte-range coordinates (abstract lock names, not data ranges)
_CONTROL_LOCK_RANGE = (LOCK_WORD_OFFSET, 4)
_HELLO_LOCK_RANGE = (0, 4)

CONTROL_LOCK_TIMEOUT = 0.5

ENV_REGION = "SHMGUARD_REGION"

# process-local serialization per (backing file, lock range); fcntl locks
# do not exclude threads of the same process
_process_locks: dict[tuple[int, int, int], threading.Lock] = {}
_process_locks_guard = threading.Lock()


def _process_lock_for(fd: int, range_start: int) -> threading.Lock:
    st = os.fstat(fd)
    key = (st.st_dev, st.st_ino, range_start)
    with _process_locks_guard:
        lock = _process_locks.get(key)
        if lock is None:
            lock = _process_locks[key] = threading.Lock()
        return lock


class ChannelState(IntEnum):
    FREE = 0
    TEMP = 1
    AUTHORIZED = 2
    ESTABLISHED = 3
    CLOSED = 4


HOST_CHANNEL = 0
HOST_SERVICE_ID = 0  # reserved; real services must use nonzero ids


@dataclass(frozen=True)
class RegionConfig:
    total_size: int = 16 * 1024 * 1024
    control_size: int = 8192
    max_channels: int = 64
    host_channel_size: int = 64 * 1024
    default_channel_size: int = 512 * 1024

    def validate(self) -> None:
        if self.total_size <= 0 or self.total_size & (self.total_size - 1):
            raise InvalidConfig(f"total_size {self.total_size} is not a power of two")
        if self.control_size < HEADER_SIZE + self.max_channels * ENTRY_SIZE:
            raise InvalidConfig(
                f"control_size {self.control_size} too small for "
                f"{self.max_channels} channel entries")
        if self.control_size + self.host_channel_size > self.total_size:
            raise InvalidConfig("control section plus host channel exceed region")
        if self.max_channels < 1:
            raise InvalidConfig("max_channels must be at least 1 (host channel)")
        if self.default_channel_size <= 2 * 64:
            raise InvalidConfig("default_channel_size leaves no room for ring headers")
        if self.host_channel_size % BUFFER_ALIGN:
            raise InvalidConfig("host_channel_size must be page aligned")

    @property
    def data_size(self) -> int:
        return self.total_size - self.control_size


@dataclass(frozen=True)
class ControlHeader:
    magic: int
    version: int
    header_size: int
    lock_word: int
    control_size: int
    next_free_offset: int
    active_channel_count: int
    max_channels: int

    def pack(self) -> bytes:
        return HEADER_FMT.pack(
            self.magic, self.version, self.header_size, self.lock_word,
            self.control_size, self.next_free_offset,
            self.active_channel_count, self.max_channels)

    @classmethod
    def unpack(cls, buf, offset: int = 0) -> "ControlHeader":
        return cls(*HEADER_FMT.unpack_from(buf, offset))


@dataclass(frozen=True)
class ChannelMeta:
    channel_id: int
    state: ChannelState
    server_service_id: int = 0
    client_service_id: int = 0
    server_vm_id: int = 0
    client_vm_id: int = 0
    server_pid: int = 0
    client_pid: int = 0
    buffer_offset: int = 0
    buffer_size: int = 0

    def pack(self) -> bytes:
        return ENTRY_FMT.pack(
            self.channel_id, int(self.state),
            self.server_service_id, self.client_service_id,
            self.server_vm_id, self.client_vm_id,
            self.server_pid, self.client_pid,
            self.buffer_offset, self.buffer_size, 0)

    @classmethod
    def unpack(cls, buf, offset: int = 0) -> "ChannelMeta":
        (channel_id, state, ssid, csid, svid, cvid,
         spid, cpid, boff, bsize, _reserved) = ENTRY_FMT.unpack_from(buf, offset)
        return cls(channel_id, ChannelState(state), ssid, csid, svid, cvid,
                   spid, cpid, boff, bsize)

    @property
    def endpoint_pids(self) -> frozenset[int]:
        return frozenset(p for p in (self.server_pid, self.client_pid) if p)

    @property
    def endpoint_service_ids(self) -> frozenset[int]:
        return frozenset((self.server_service_id, self.client_service_id))

    @property
    def is_service_channel(self) -> bool:
        """True for a dedicated service-pair data channel.

        The host channel and TEMP handshake channels have the host
        (service id 0) on at least one side and carry control traffic
        before establishment.
        """
        return (self.channel_id != HOST_CHANNEL
                and self.server_service_id != HOST_SERVICE_ID
                and self.client_service_id != HOST_SERVICE_ID)


class ControlLockGuard:
    """Holds the cross-process control lock; releases on context exit."""

    def __init__(self, region: "Region"):
        self._region = region
        self._held = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()

    def release(self) -> None:
        if self._held:
            self._region._unlock_control()
            self._held = False


class Region:
    """Handle to the shared region.

    Exactly one process (the broker) holds a handle with ``broker=True``;
    only that handle may mutate the control section.  Non-broker handles
    read control metadata lock-free and must obtain data-section views
    through the access gate.
    """

    def __init__(self, path: Path, fileobj, mm: mmap.mmap, *, broker: bool):
        self.path = Path(path)
        self._file = fileobj
        self._mm = mm
        self.broker = broker
        self.owner_token = (secrets.randbits(32) | 1) if broker else 0
        header = ControlHeader.unpack(mm)
        self.control_size = header.control_size
        self.max_channels = header.max_channels
        self.total_size = mm.size()
        self._proc_lock = _process_lock_for(fileobj.fileno(), _CONTROL_LOCK_RANGE[0])
        self._closed = False

    # -- construction -------------------------------------------------

    @classmethod
    def create(cls, config: RegionConfig, backing_path) -> "Region":
        config.validate()
        path = Path(backing_path)
        try:
            f = open(path, "w+b")
            f.truncate(config.total_size)
            mm = mmap.mmap(f.fileno(), config.total_size)
        except OSError as exc:
            raise IOFailure(f"cannot create region at {path}: {exc}") from exc

        header = ControlHeader(
            magic=MAGIC, version=VERSION, header_size=HEADER_SIZE,
            lock_word=0, control_size=config.control_size,
            next_free_offset=config.host_channel_size,
            active_channel_count=1, max_channels=config.max_channels)
        mm[0:HEADER_SIZE] = header.pack()

        host = ChannelMeta(
            channel_id=HOST_CHANNEL, state=ChannelState.ESTABLISHED,
            buffer_offset=0, buffer_size=config.host_channel_size)
        mm[ENTRY_TABLE_OFFSET:ENTRY_TABLE_OFFSET + ENTRY_SIZE] = host.pack()
        mm.flush()
        return cls(path, f, mm, broker=True)

    @classmethod
    def open(cls, backing_path) -> "Region":
        return cls._open(backing_path, broker=False)

    @classmethod
    def adopt(cls, backing_path) -> "Region":
        """Reopen an existing region with broker authority.

        Used when the broker restarts over a region left behind by a
        crashed predecessor: clears a stale lock word and closes any
        channels stranded mid-handshake, then re-validates invariants.
        """
        region = cls._open(backing_path, broker=True)
        hdr = region.read_header()
        if hdr.lock_word:
            region._store_lock_word(0)
        with region.control_lock():
            for meta in region.iter_channels():
                if meta.channel_id == HOST_CHANNEL:
                    continue
                if meta.state in (ChannelState.TEMP, ChannelState.AUTHORIZED,
                                  ChannelState.ESTABLISHED):
                    region._close_channel_locked(meta)
        region.validate_invariants()
        return region

    @classmethod
    def _open(cls, backing_path, *, broker: bool) -> "Region":
        path = Path(backing_path)
        try:
            f = open(path, "r+b")
            size = os.fstat(f.fileno()).st_size
            mm = mmap.mmap(f.fileno(), size)
        except OSError as exc:
            raise IOFailure(f"cannot open region at {path}: {exc}") from exc
        if size < HEADER_SIZE:
            f.close()
            raise BadMagic(f"{path} is too small to hold a region header")
        header = ControlHeader.unpack(mm)
        if header.magic != MAGIC:
            mm.close(); f.close()
            raise BadMagic(f"{path} has magic {header.magic:#x}")
        if header.version != VERSION:
            mm.close(); f.close()
            raise VersionMismatch(
                f"{path} is layout version {header.version}, expected {VERSION}")
        return cls(path, f, mm, broker=broker)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._mm.flush()
            self._mm.close()
            self._file.close()

    # -- control lock ---------------------------------------------------

    def control_lock(self, timeout: float = CONTROL_LOCK_TIMEOUT) -> ControlLockGuard:
        """Acquire the cross-process control lock with a bounded wait.

        Realized as an fcntl byte-range lock (auto-released if the holder
        dies) plus a process-local mutex; the owner token is mirrored into
        the header lock word so other processes can observe the holder.
        """
        deadline = time.monotonic() + timeout
        if not self._proc_lock.acquire(timeout=timeout):
            raise LockTimeout("control lock held by another thread")
        start, length = _CONTROL_LOCK_RANGE
        delay = 0.0002
        while True:
            try:
                fcntl.lockf(self._file.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB,
                            length, start)
                break
            except OSError:
                if time.monotonic() >= deadline:
                    self._proc_lock.release()
                    raise LockTimeout("control lock held by another process")
                time.sleep(delay)
                delay = min(delay * 2, 0.01)
        self._store_lock_word(self.owner_token or 1)
        guard = ControlLockGuard(self)
        guard._held = True
        return guard

    def _unlock_control(self) -> None:
        self._store_lock_word(0)
        start, length = _CONTROL_LOCK_RANGE
        fcntl.lockf(self._file.fileno(), fcntl.LOCK_UN, length, start)
        self._proc_lock.release()

    def _store_lock_word(self, value: int) -> None:
        struct.pack_into("<I", self._mm, LOCK_WORD_OFFSET, value)

    def hello_lock(self, timeout: float) -> "FileRangeLock":
        """Serializes guest use of the host channel during hello exchanges."""
        return FileRangeLock(self._file, _HELLO_LOCK_RANGE, timeout)

    # -- control reads ----------------------------------------------------

    def read_header(self) -> ControlHeader:
        return ControlHeader.unpack(self._mm)

    def read_meta(self, channel_id: int) -> ChannelMeta:
        if not 0 <= channel_id < self.max_channels:
            raise BadChannel(f"channel {channel_id} out of range")
        off = ENTRY_TABLE_OFFSET + channel_id * ENTRY_SIZE
        # lock-free read: re-read until two consecutive snapshots agree
        raw = bytes(self._mm[off:off + ENTRY_SIZE])
        for _ in range(4):
            again = bytes(self._mm[off:off + ENTRY_SIZE])
            if again == raw:
                break
            raw = again
        return ChannelMeta.unpack(raw)

    def channel_state_probe(self, channel_id: int) -> tuple[int, int]:
        """(mmap offset, length) of the raw state word, for fast gate probes."""
        off = ENTRY_TABLE_OFFSET + channel_id * ENTRY_SIZE + 4
        return off, 4

    def raw_state(self, channel_id: int) -> bytes:
        off, ln = self.channel_state_probe(channel_id)
        return bytes(self._mm[off:off + ln])

    def iter_channels(self):
        for cid in range(self.max_channels):
            yield self.read_meta(cid)

    # -- control writes (broker only) ----------------------------------

    def _require_broker(self) -> None:
        if not self.broker:
            raise NotBroker("control section is writable only by the broker")

    def _write_meta(self, meta: ChannelMeta) -> None:
        off = ENTRY_TABLE_OFFSET + meta.channel_id * ENTRY_SIZE
        self._mm[off:off + ENTRY_SIZE] = meta.pack()

    def _write_header(self, header: ControlHeader) -> None:
        self._mm[0:HEADER_SIZE] = header.pack()

    def allocate_channel(self, request: ChannelMeta, size: int) -> int:
        """Carve the next buffer out of the data section.

        Bump allocation only: offsets advance by the size rounded up to
        page alignment and are never reused, so non-overlap holds by
        construction for the life of the region.
        """
        self._require_broker()
        if size <= 0:
            raise InvalidConfig("channel size must be positive")
        if request.state not in (ChannelState.TEMP, ChannelState.AUTHORIZED):
            raise BadChannel("new channels start as TEMP or AUTHORIZED")
        aligned = (size + BUFFER_ALIGN - 1) & ~(BUFFER_ALIGN - 1)
        with self.control_lock():
            header = self.read_header()
            slot = None
            for cid in range(1, self.max_channels):
                if self.read_meta(cid).state == ChannelState.FREE:
                    slot = cid
                    break
            if slot is None:
                raise NoFreeSlot("channel table is full")
            if header.next_free_offset + aligned > self.data_size:
                raise RegionExhausted(
                    f"need {aligned} bytes, "
                    f"{self.data_size - header.next_free_offset} remain")
            meta = replace(request, channel_id=slot,
                           buffer_offset=header.next_free_offset,
                           buffer_size=size)
            self._write_meta(meta)
            self._write_header(replace(
                header,
                next_free_offset=header.next_free_offset + aligned,
                active_channel_count=header.active_channel_count + 1))
            return slot

    def release_channel(self, channel_id: int) -> None:
        """Close a channel: zero its pids and buffer, keep the offset burned."""
        self._require_broker()
        with self.control_lock():
            meta = self.read_meta(channel_id)
            if channel_id == HOST_CHANNEL:
                raise BadChannel("host channel is immutable")
            if meta.state not in (ChannelState.TEMP, ChannelState.AUTHORIZED,
                                  ChannelState.ESTABLISHED):
                raise BadChannel(f"channel {channel_id} is {meta.state.name}")
            self._close_channel_locked(meta)

    def _close_channel_locked(self, meta: ChannelMeta) -> None:
        start = self.control_size + meta.buffer_offset
        self._mm[start:start + meta.buffer_size] = bytes(meta.buffer_size)
        self._write_meta(replace(meta, state=ChannelState.CLOSED,
                                 server_pid=0, client_pid=0))
        header = self.read_header()
        self._write_header(replace(
            header, active_channel_count=header.active_channel_count - 1))

    def set_channel_state(self, channel_id: int, state: ChannelState) -> None:
        self._require_broker()
        if channel_id == HOST_CHANNEL:
            raise BadChannel("host channel is immutable")
        with self.control_lock():
            meta = self.read_meta(channel_id)
            if meta.state == ChannelState.FREE:
                raise BadChannel(f"channel {channel_id} is FREE")
            self._write_meta(replace(meta, state=state))

    # -- data section -----------------------------------------------------

    @property
    def data_size(self) -> int:
        return self.total_size - self.control_size

    def _data_view(self, offset: int, length: int) -> memoryview:
        """Raw data-section view; gate.map is the sanctioned path to this."""
        if offset < 0 or length < 0 or offset + length > self.data_size:
            raise BadChannel("view outside data section")
        start = self.control_size + offset
        return memoryview(self._mm)[start:start + length]

    # -- integrity ---------------------------------------------------------

    def validate_invariants(self) -> None:
        """Full scan: header sanity, channel 0, pairwise non-overlap."""
        header = self.read_header()
        if header.magic != MAGIC or header.version != VERSION:
            raise BadMagic("header corrupted")
        if header.active_channel_count > header.max_channels:
            raise BadChannel("active_channel_count exceeds max_channels")
        host = self.read_meta(HOST_CHANNEL)
        if (host.state != ChannelState.ESTABLISHED or host.buffer_offset != 0
                or host.buffer_size == 0):
            raise BadChannel("host channel metadata corrupted")
        ranges = []
        for meta in self.iter_channels():
            if meta.state == ChannelState.FREE:
                continue
            lo, hi = meta.buffer_offset, meta.buffer_offset + meta.buffer_size
            if hi > self.data_size:
                raise BadChannel(f"channel {meta.channel_id} exceeds data section")
            for (olo, ohi, ocid) in ranges:
                if lo < ohi and olo < hi:
                    raise BadChannel(
                        f"channels {meta.channel_id} and {ocid} overlap")
            ranges.append((lo, hi, meta.channel_id))


class FileRangeLock:
    """Plain fcntl range lock with bounded acquisition (no owner word)."""

    def __init__(self, fileobj, byte_range: tuple[int, int], timeout: float):
        self._file = fileobj
        self._range = byte_range
        self._timeout = timeout
        self._proc_lock = _process_lock_for(fileobj.fileno(), byte_range[0])
        self._held = False

    def __enter__(self):
        deadline = time.monotonic() + self._timeout
        if not self._proc_lock.acquire(timeout=self._timeout):
            raise LockTimeout("lock held by another thread")
        start, length = self._range
        delay = 0.0005
        while True:
            try:
                fcntl.lockf(self._file.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB,
                            length, start)
                self._held = True
                return self
            except OSError:
                if time.monotonic() >= deadline:
                    self._proc_lock.release()
                    raise LockTimeout("lock held by another process")
                time.sleep(delay)
                delay = min(delay * 2, 0.02)

    def __exit__(self, *exc):
        if self._held:
            start, length = self._range
            fcntl.lockf(self._file.fileno(), fcntl.LOCK_UN, length, start)
            self._proc_lock.release()
            self._held = False


def region_path_from_env() -> Path:
    value = os.environ.get(ENV_REGION)
    if not value:
        raise IOFailure(f"{ENV_REGION} is not set and no region path was given")
    return Path(value)
