"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class FedsimError(Exception):
    """Base class for all errors raised by this package."""


class InvalidConfigError(FedsimError):
    """A configuration field is missing, unknown, or out of range."""


class DatasetNotFoundError(FedsimError):
    """The configured dataset path does not exist."""


class AlreadyRegisteredError(FedsimError):
    """A plugin slot was registered twice."""


class RunInProgressError(FedsimError):
    """Registration was attempted after a run started."""


class TrainingDivergedError(FedsimError):
    """Local training produced a non-finite loss."""


class InfeasiblePartitionError(FedsimError):
    """The requested partition cannot be satisfied by the pool."""


class MalformedManifestError(FedsimError):
    """A dataset manifest is structurally invalid or references missing shards."""


class ShapeMismatchError(FedsimError):
    """Stored sample data disagrees with the declared feature dimension."""


class UnknownFormatVersionError(FedsimError):
    """A dataset was written with an unsupported format version."""


class LayoutMismatchError(FedsimError):
    """Parameter vectors with different layouts were combined."""


class OrphanRecordError(FedsimError):
    """A metrics record was submitted before its parent record."""


class TaskNotFoundError(FedsimError):
    """No tracked task exists under the given id."""


class StorageError(FedsimError):
    """The metrics store could not be read or written."""


class InstanceTooLargeError(FedsimError):
    """The brute-force scheduler oracle refuses instances beyond its search cap."""


class UnknownClientError(FedsimError):
    """A measured client was not part of the corresponding allocation."""


class ProtocolError(FedsimError):
    """Base class for wire-protocol decode/encode failures."""


class TruncatedFrameError(ProtocolError):
    """The byte stream ended before a complete frame was read."""


class BadMagicError(ProtocolError):
    """The frame does not start with the protocol magic bytes."""


class VersionMismatchError(ProtocolError):
    """The frame declares an unsupported protocol version."""


class OversizePayloadError(ProtocolError):
    """The frame declares a payload above the hard size cap."""


class RegistryUnreachableError(FedsimError):
    """The registry could not be contacted within the retry budget."""


class QuorumLostError(FedsimError):
    """Too few clients completed a round for it to be aggregated."""


class WorkerFailureError(FedsimError):
    """A remote worker failed in a way that aborts the task."""


class BusyError(FedsimError):
    """The client rejected a request because one is already executing."""
