"""Exception hierarchy shared across the package."""


class ShmGuardError(Exception):
    """Base class for all shmguard errors."""


class InvalidConfig(ShmGuardError):
    """Region configuration violates a layout invariant."""


class IOFailure(ShmGuardError):
    """Backing-file I/O failed."""


class BadMagic(ShmGuardError):
    """Backing file does not start with the region magic."""


class VersionMismatch(ShmGuardError):
    """Backing file was written by an incompatible layout version."""


class NotBroker(ShmGuardError):
    """Control-section mutation attempted through a non-broker handle."""


class BadChannel(ShmGuardError):
    """Channel id out of range, or operation invalid for its state."""


class RegionExhausted(ShmGuardError):
    """Data section has no room left for the requested buffer."""


class NoFreeSlot(ShmGuardError):
    """Channel table has no FREE entry left."""


class LockTimeout(ShmGuardError):
    """Control lock could not be acquired within its bound."""


class PermissionDenied(ShmGuardError):
    """Access gate denied a data-section operation.

    Carries the structured denial reason so callers (and the attack
    suite) can assert on the exact clause that failed.
    """

    def __init__(self, reason, detail: str = ""):
        self.reason = reason
        super().__init__(f"permission denied: {getattr(reason, 'value', reason)}"
                         + (f" ({detail})" if detail else ""))


class PkiError(ShmGuardError):
    """Base class for credential-machinery failures."""


class DuplicateIdentity(PkiError):
    """(service_id, vm_id) already present in the allowed-service list."""


class HandshakeAborted(ShmGuardError):
    """Handshake terminated before a channel grant."""

    def __init__(self, reason, detail: str = ""):
        self.reason = reason
        super().__init__(f"handshake aborted: {getattr(reason, 'value', reason)}"
                         + (f" ({detail})" if detail else ""))


class WireError(ShmGuardError):
    """Malformed or truncated protocol message."""


class TransportTimeout(ShmGuardError):
    """Ring operation did not complete before its deadline."""


class ChannelClosed(ShmGuardError):
    """Peer or broker closed the channel underneath an endpoint."""


class BrokerUnreachable(ShmGuardError):
    """No broker answered on the host channel within the timeout."""
