"""shmguard: brokered shared-memory IPC with authenticated channels.

A trusted broker owns a memory-mapped region, acts as certificate
authority, and grants isolated per-service-pair channels after an
eight-step mutual-authentication handshake.  A mandatory access gate
checks every data-section operation, and a doorbell/polling ring-buffer
data plane carries payloads with near-raw-shared-memory overhead.
"""

from .api import Credentials, EstablishedChannel, Listener, connect, listen
from .broker import Broker, PkiMaterial, RegistryEntry, parse_registry
from .errors import (
    BadChannel,
    BadMagic,
    BrokerUnreachable,
    ChannelClosed,
    DuplicateIdentity,
    HandshakeAborted,
    InvalidConfig,
    IOFailure,
    LockTimeout,
    NoFreeSlot,
    NotBroker,
    PermissionDenied,
    PkiError,
    RegionExhausted,
    ShmGuardError,
    TransportTimeout,
    VersionMismatch,
    WireError,
)
from .gate import AccessKind, AccessRequest, DenialReason, Gate, PolicyEntry, Verdict
from .handshake import ClientSession, HostSession, ServerSession, ServiceIdentity
from .region import (
    ChannelMeta,
    ChannelState,
    ControlHeader,
    HOST_CHANNEL,
    Region,
    RegionConfig,
)
from .transport import NotifyMode, RingProfile, WokeBy

__version__ = "0.1.0"

__all__ = [
    "AccessKind", "AccessRequest", "BadChannel", "BadMagic", "Broker",
    "BrokerUnreachable", "ChannelClosed", "ChannelMeta", "ChannelState",
    "ClientSession", "ControlHeader", "Credentials", "DenialReason",
    "DuplicateIdentity", "EstablishedChannel", "Gate", "HandshakeAborted",
    "HostSession", "HOST_CHANNEL", "InvalidConfig", "IOFailure", "Listener",
    "LockTimeout", "NoFreeSlot", "NotBroker", "NotifyMode", "PermissionDenied",
    "PkiError", "PkiMaterial", "PolicyEntry", "Region", "RegionConfig",
    "RegionExhausted", "RegistryEntry", "RingProfile", "ServerSession",
    "ServiceIdentity", "ShmGuardError", "TransportTimeout", "Verdict",
    "VersionMismatch", "WireError", "WokeBy", "connect", "listen",
    "parse_registry",
]
