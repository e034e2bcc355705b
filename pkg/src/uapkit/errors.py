"""Exception types shared across modules."""


class TrainingDiverged(RuntimeError):
    """Optimization produced a non-finite loss or non-finite activations."""


class FileFormatError(ValueError):
    """Serialized artifact is structurally invalid (bad magic, malformed header)."""


class VersionMismatchError(FileFormatError):
    """Artifact was written by an incompatible format version."""


class DigestMismatchError(FileFormatError):
    """Artifact bytes do not match their recorded checksum."""


class TruncatedFileError(FileFormatError):
    """Artifact is shorter (or longer) than its header declares."""
