"""Exception types shared across the package."""


class AucisError(Exception):
    """Base class for all package-specific errors."""


class DataValidationError(AucisError):
    """A dataset, record, or config value violates a declared invariant."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DatasetWriteError(AucisError):
    """Dataset could not be written to disk."""


class ConfigError(AucisError):
    """Invalid or unusable run configuration."""


class EnumerationInfeasibleError(AucisError):
    """The label space is too large for exact enumeration (num_aus > 12)."""


class EvidenceImpossibleError(AucisError):
    """The queried appearance code has zero probability under the model."""


class DimensionMismatchError(AucisError):
    """Vector or matrix shapes do not line up."""


class EmptyDictionaryError(AucisError):
    """The confounder dictionary has no entries."""


class EmptySubjectError(AucisError):
    """A subject required for dictionary construction has no samples."""

    def __init__(self, subject_id: int, message: str | None = None):
        super().__init__(message or f"subject {subject_id} has no samples")
        self.subject_id = subject_id


class ModuleNotInitializedError(AucisError):
    """The intervention head was used before its dictionary was built."""


class CheckpointFormatError(AucisError):
    """Checkpoint file is malformed or has an unsupported version."""


class MissingArrayError(CheckpointFormatError):
    """A named array expected in the checkpoint is absent."""

    def __init__(self, name: str):
        super().__init__(f"checkpoint is missing array {name!r}")
        self.name = name


class ProvenanceMismatchError(AucisError):
    """Dataset provenance does not match the generator it is claimed to come from."""
