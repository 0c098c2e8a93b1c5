"""Exception hierarchy shared by every subsystem.

The CLI maps these onto exit codes: :class:`InputError` and subclasses are
validation failures, :class:`InvariantViolation` is an internal bug.
"""


class EsftServeError(Exception):
    """Base class for all errors raised by this package."""


class InputError(EsftServeError, ValueError):
    """Bad user input: malformed profiles, infeasible E_max, bad shapes."""


class ConfigError(InputError):
    """Inconsistent model or engine configuration."""


class ManifestError(InputError):
    """Adapter manifest does not fit the serving system."""


class ValidationError(InputError):
    """Per-batch validation failed (e.g. an AID outside {-1} or [0, N))."""


class CapacityError(EsftServeError):
    """No free adapter slot is left."""


class AllocationError(EsftServeError, MemoryError):
    """The physical page pool cannot satisfy a request."""

    def __init__(self, requested: int, available: int):
        super().__init__(
            f"page pool exhausted: requested {requested} pages, {available} available"
        )
        self.requested = requested
        self.available = available


class UsageError(EsftServeError):
    """An operation was called in a state that does not allow it."""


class AdapterInUseError(UsageError):
    """Eviction requested for an adapter that still has in-flight requests."""


class MemoryFault(EsftServeError):
    """Access to a virtual slot that is not physically backed."""

    def __init__(self, message: str, layer: int | None = None, slot: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.slot = slot


class InvariantViolation(EsftServeError, AssertionError):
    """Internal consistency check failed."""


class VerificationFailure(EsftServeError):
    """Multi-adapter output differs from the merged-model oracle."""
