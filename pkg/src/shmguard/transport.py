"""Zero-copy data plane: SPSC rings, doorbells, anticipation polling.

Each channel buffer holds two independent single-producer/single-consumer
byte rings (one per direction), each with a 64-byte header up front.
Frames are length-prefixed and never split across the wrap point; a pad
marker (length ``0xFFFFFFFF``) skips the consumer to offset zero.

Notification is a named-FIFO doorbell per ring and direction.  Producers
publish payload bytes before the head counter (x86 store ordering plus
CPython's serialized bytecode make the mmap writes visible in program
order), then consult the notify policy: in the anticipation profile a
doorbell is raised only when the consumer advertises it is parked in a
blocking wait, so bursts hitting an actively polling consumer raise few
or no interrupt-equivalents.  The consumer busy-polls the head for the
anticipation window after every wake before re-arming the blocking wait,
re-checking the head after arming so the classic sleep/wake race cannot
lose a frame; the bounded poll slice is a second backstop.

Ring byte layout is frozen in docs/ring-format.md.
"""

from __future__ import annotations

import os
import select
import struct
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .errors import TransportTimeout
from .gate import AccessKind

RING_HEADER_SIZE = 64
RINGS_PER_CHANNEL = 2

_OFF_CAPACITY = 0
_OFF_HEAD = 8
_OFF_TAIL = 16
_OFF_DOORBELL_SEQ = 24
_OFF_FREE_SEQ = 32
_OFF_CONSUMER_STATE = 40
_OFF_PRODUCER_WAITING = 44

_PAD_MARKER = 0xFFFFFFFF

_u32 = struct.Struct("<I")
_u64 = struct.Struct("<Q")

POLL_SLICE = 0.01            # lost-wakeup backstop while parked
DEFAULT_WINDOW = 100e-6      # anticipation window (seconds)


class NotifyMode(Enum):
    ALWAYS = "always"
    WHEN_BLOCKED = "when-blocked"


class WokeBy(Enum):
    DATA = "data"
    DOORBELL = "doorbell"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class RingProfile:
    """Notification/batching discipline for one ring pair."""

    mode: NotifyMode = NotifyMode.WHEN_BLOCKED
    window: float = DEFAULT_WINDOW
    rendezvous: bool = False   # one frame per doorbell, ack each message

    @classmethod
    def naive(cls) -> "RingProfile":
        return cls(mode=NotifyMode.ALWAYS, window=0.0, rendezvous=True)

    @classmethod
    def ring_only(cls) -> "RingProfile":
        return cls(mode=NotifyMode.ALWAYS, window=0.0, rendezvous=False)

    @classmethod
    def anticipation(cls, window: float = DEFAULT_WINDOW) -> "RingProfile":
        return cls(mode=NotifyMode.WHEN_BLOCKED, window=window,
                   rendezvous=False)


def ring_capacity(buffer_size: int) -> int:
    """Per-direction data bytes carved from a channel buffer."""
    usable = buffer_size - RINGS_PER_CHANNEL * RING_HEADER_SIZE
    return (usable // 2) & ~7


def max_frame(buffer_size: int) -> int:
    return ring_capacity(buffer_size) // 2 - 8


def _ring_offsets(buffer_size: int, ring_index: int) -> tuple[int, int, int]:
    """(header offset, data offset, capacity) for one direction."""
    cap = ring_capacity(buffer_size)
    header = ring_index * RING_HEADER_SIZE
    data = RINGS_PER_CHANNEL * RING_HEADER_SIZE + ring_index * cap
    return header, data, cap


def init_channel_rings(view, buffer_size: int) -> None:
    """Zero both ring headers and stamp capacities (broker, at grant)."""
    cap = ring_capacity(buffer_size)
    for ring in range(RINGS_PER_CHANNEL):
        header, _, _ = _ring_offsets(buffer_size, ring)
        view[header:header + RING_HEADER_SIZE] = bytes(RING_HEADER_SIZE)
        _u64.pack_into(view, header + _OFF_CAPACITY, cap)


# -- doorbells ---------------------------------------------------------------


def bell_dir(region_path) -> Path:
    return Path(f"{region_path}.bells")


def bell_path(region_path, channel_id: int, ring_index: int, kind: str) -> Path:
    return bell_dir(region_path) / f"{channel_id}.{ring_index}.{kind}"


def service_bell_path(region_path, service_id: int, vm_id: int) -> Path:
    return bell_dir(region_path) / f"svc.{service_id}.{vm_id}"


def create_bell(path: Path) -> None:
    try:
        os.mkfifo(path)
    except FileExistsError:
        pass


def create_channel_bells(region_path, channel_id: int) -> None:
    bell_dir(region_path).mkdir(exist_ok=True)
    for ring in range(RINGS_PER_CHANNEL):
        for kind in ("data", "free"):
            create_bell(bell_path(region_path, channel_id, ring, kind))


def unlink_channel_bells(region_path, channel_id: int) -> None:
    for ring in range(RINGS_PER_CHANNEL):
        for kind in ("data", "free"):
            try:
                os.unlink(bell_path(region_path, channel_id, ring, kind))
            except FileNotFoundError:
                pass


class Doorbell:
    """Cross-process wake primitive over a named FIFO.

    Contract: wake at least the parties currently waiting; spurious wakes
    are allowed.  The signal side opens read-write so it never blocks or
    fails for lack of a reader (Linux semantics); a full pipe counts as
    already signaled.
    """

    def __init__(self, path: Path):
        self.path = Path(path)
        self._signal_fd: int | None = None
        self._wait_fd: int | None = None
        self._poller = None

    def signal(self) -> None:
        if self._signal_fd is None:
            self._signal_fd = os.open(self.path, os.O_RDWR | os.O_NONBLOCK)
        try:
            os.write(self._signal_fd, b"\x01")
        except BlockingIOError:
            pass

    def _ensure_wait(self):
        if self._wait_fd is None:
            self._wait_fd = os.open(self.path, os.O_RDONLY | os.O_NONBLOCK)
            self._poller = select.poll()
            self._poller.register(self._wait_fd, select.POLLIN)
        return self._poller

    def wait(self, timeout: float) -> bool:
        poller = self._ensure_wait()
        return bool(poller.poll(max(0.0, timeout) * 1000))

    def drain(self) -> None:
        self._ensure_wait()
        while True:
            try:
                if not os.read(self._wait_fd, 4096):
                    return
            except BlockingIOError:
                return

    def close(self) -> None:
        for fd in (self._signal_fd, self._wait_fd):
            if fd is not None:
                try:
                    os.close(fd)
                except OSError:
                    pass
        self._signal_fd = self._wait_fd = None
        self._poller = None


@dataclass
class RingBells:
    data: Doorbell
    free: Doorbell

    @classmethod
    def for_ring(cls, region_path, channel_id: int, ring_index: int) -> "RingBells":
        return cls(Doorbell(bell_path(region_path, channel_id, ring_index, "data")),
                   Doorbell(bell_path(region_path, channel_id, ring_index, "free")))

    def close(self) -> None:
        self.data.close()
        self.free.close()


# -- ring ends --------------------------------------------------------------


class _RingEnd:
    def __init__(self, view, buffer_size: int, ring_index: int,
                 bells: RingBells, profile: RingProfile, checker=None):
        header, data, cap = _ring_offsets(buffer_size, ring_index)
        self._view = view
        self._hdr = header
        self._data = data
        self._cap = cap
        self._bells = bells
        self._profile = profile
        self._checker = checker
        stamped = _u64.unpack_from(view, header + _OFF_CAPACITY)[0]
        if stamped and stamped != cap:
            raise ValueError(f"ring capacity mismatch: header says {stamped}, "
                             f"layout says {cap}")
        self.max_frame = cap // 2 - 8

    # counter accessors kept tiny: these are the hot path
    def _head(self) -> int:
        return _u64.unpack_from(self._view, self._hdr + _OFF_HEAD)[0]

    def _tail(self) -> int:
        return _u64.unpack_from(self._view, self._hdr + _OFF_TAIL)[0]

    def doorbell_signals(self) -> int:
        return _u64.unpack_from(self._view, self._hdr + _OFF_DOORBELL_SEQ)[0]

    def free_signals(self) -> int:
        return _u64.unpack_from(self._view, self._hdr + _OFF_FREE_SEQ)[0]

    def close(self) -> None:
        self._bells.close()


class ProducerEnd(_RingEnd):
    """Owns the head counter; exactly one thread may use it at a time."""

    def send(self, payload, timeout: float | None = None) -> None:
        n = len(payload)
        if n > self.max_frame:
            raise ValueError(f"frame of {n} bytes exceeds max_frame "
                             f"{self.max_frame}")
        padded = (n + 3) & ~3
        need = 4 + padded
        deadline = None if timeout is None else time.monotonic() + timeout

        view, data, cap = self._view, self._data, self._cap
        head = self._head()
        pos = head % cap
        wrap = cap - pos
        total = need if need <= wrap else wrap + need
        while cap - (head - self._tail()) < total:
            self._wait_for_space(total, deadline)

        if self._checker is not None:
            self._checker(AccessKind.WRITE, data + pos, min(total, cap - pos))
        if need > wrap:
            _u32.pack_into(view, data + pos, _PAD_MARKER)
            head += wrap
            pos = 0
        _u32.pack_into(view, data + pos, n)
        view[data + pos + 4:data + pos + 4 + n] = payload
        head += need
        _u64.pack_into(view, self._hdr + _OFF_HEAD, head)

        if (self._profile.mode is NotifyMode.ALWAYS
                or self.consumer_blocked()):
            self._ring_data_bell()
        if self._profile.rendezvous:
            self._wait_drained(deadline)

    def consumer_blocked(self) -> bool:
        return self._view[self._hdr + _OFF_CONSUMER_STATE] == 1

    def should_signal(self) -> bool:
        """The notify policy: suppress while the consumer is polling."""
        return (self._profile.mode is NotifyMode.ALWAYS
                or self.consumer_blocked())

    def _ring_data_bell(self) -> None:
        hdr = self._hdr
        seq = _u64.unpack_from(self._view, hdr + _OFF_DOORBELL_SEQ)[0]
        _u64.pack_into(self._view, hdr + _OFF_DOORBELL_SEQ, seq + 1)
        self._bells.data.signal()

    def _wait_for_space(self, total: int, deadline: float | None) -> None:
        hdr = self._hdr
        _u32.pack_into(self._view, hdr + _OFF_PRODUCER_WAITING, 1)
        try:
            head = self._head()
            while self._cap - (head - self._tail()) < total:
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise TransportTimeout("ring full past deadline")
                    self._bells.free.wait(min(remaining, POLL_SLICE))
                else:
                    self._bells.free.wait(POLL_SLICE)
                self._bells.free.drain()
        finally:
            _u32.pack_into(self._view, hdr + _OFF_PRODUCER_WAITING, 0)

    def _wait_drained(self, deadline: float | None) -> None:
        hdr = self._hdr
        _u32.pack_into(self._view, hdr + _OFF_PRODUCER_WAITING, 1)
        try:
            while self._tail() != self._head():
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise TransportTimeout("consumer did not drain in time")
                    self._bells.free.wait(min(remaining, POLL_SLICE))
                else:
                    self._bells.free.wait(POLL_SLICE)
                self._bells.free.drain()
        finally:
            _u32.pack_into(self._view, hdr + _OFF_PRODUCER_WAITING, 0)

    def wait_drained(self, timeout: float | None = None) -> None:
        """Block until the consumer has read everything sent so far."""
        deadline = None if timeout is None else time.monotonic() + timeout
        self._wait_drained(deadline)


class ConsumerEnd(_RingEnd):
    """Owns the tail counter; exactly one thread may use it at a time."""

    def receive(self, timeout: float | None = None) -> bytes:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            frame = self.try_receive()
            if frame is not None:
                return frame
            remaining = (None if deadline is None
                         else deadline - time.monotonic())
            if remaining is not None and remaining <= 0:
                raise TransportTimeout("no frame before deadline")
            if self.wait_doorbell(self._profile.window, remaining) is WokeBy.TIMEOUT:
                raise TransportTimeout("no frame before deadline")

    def try_receive(self) -> bytes | None:
        view, data, cap, hdr = self._view, self._data, self._cap, self._hdr
        while True:
            tail = self._tail()
            if self._head() == tail:
                return None
            pos = tail % cap
            length = _u32.unpack_from(view, data + pos)[0]
            if length == _PAD_MARKER:
                _u64.pack_into(view, hdr + _OFF_TAIL, tail + (cap - pos))
                continue
            if self._checker is not None:
                self._checker(AccessKind.READ, data + pos, 4 + length)
            payload = bytes(view[data + pos + 4:data + pos + 4 + length])
            padded = (length + 3) & ~3
            _u64.pack_into(view, hdr + _OFF_TAIL, tail + 4 + padded)
            if self._profile.rendezvous or self._producer_waiting():
                self._ring_free_bell()
            return payload

    def _producer_waiting(self) -> bool:
        return self._view[self._hdr + _OFF_PRODUCER_WAITING] == 1

    def _ring_free_bell(self) -> None:
        hdr = self._hdr
        seq = _u64.unpack_from(self._view, hdr + _OFF_FREE_SEQ)[0]
        _u64.pack_into(self._view, hdr + _OFF_FREE_SEQ, seq + 1)
        self._bells.free.signal()

    def wait_doorbell(self, window: float, timeout: float | None) -> WokeBy:
        """Busy-poll the head for ``window``, then park on the doorbell."""
        view, hdr = self._view, self._hdr
        head_off, tail_off = hdr + _OFF_HEAD, hdr + _OFF_TAIL
        if window > 0:
            end = time.monotonic() + window
            spins = 0
            while True:
                if (_u64.unpack_from(view, head_off)[0]
                        != _u64.unpack_from(view, tail_off)[0]):
                    return WokeBy.DATA
                spins += 1
                if spins & 0xF == 0:
                    time.sleep(0)  # single-core friendliness
                if time.monotonic() >= end:
                    break
        deadline = None if timeout is None else time.monotonic() + timeout
        _u32.pack_into(view, hdr + _OFF_CONSUMER_STATE, 1)
        try:
            # re-check after arming: closes the sleep/wake race
            if (_u64.unpack_from(view, head_off)[0]
                    != _u64.unpack_from(view, tail_off)[0]):
                return WokeBy.DATA
            while True:
                if deadline is None:
                    slice_ = POLL_SLICE
                else:
                    slice_ = min(POLL_SLICE, deadline - time.monotonic())
                    if slice_ <= 0:
                        return WokeBy.TIMEOUT
                if self._bells.data.wait(slice_):
                    self._bells.data.drain()
                    return WokeBy.DOORBELL
                if (_u64.unpack_from(view, head_off)[0]
                        != _u64.unpack_from(view, tail_off)[0]):
                    return WokeBy.DATA
        finally:
            _u32.pack_into(view, hdr + _OFF_CONSUMER_STATE, 0)


def attach_producer(buffer_view, buffer_size: int, ring_index: int,
                    bells: RingBells, profile: RingProfile,
                    checker=None) -> ProducerEnd:
    return ProducerEnd(buffer_view, buffer_size, ring_index, bells, profile,
                       checker)


def attach_consumer(buffer_view, buffer_size: int, ring_index: int,
                    bells: RingBells, profile: RingProfile,
                    checker=None) -> ConsumerEnd:
    return ConsumerEnd(buffer_view, buffer_size, ring_index, bells, profile,
                       checker)
