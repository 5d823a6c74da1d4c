"""Exception hierarchy. CLI exit codes are keyed off the three top-level families."""


class FSLError(Exception):
    """Base class for all package errors."""


class ConfigError(FSLError):
    """Invalid or incomplete configuration (CLI exit code 2)."""


class DataError(FSLError):
    """Problems with datasets, manifests or embedding files (CLI exit code 3)."""


class ManifestError(DataError):
    pass


class SamplingError(DataError):
    pass


class IngestionError(DataError):
    pass


class EmbeddingLookupError(DataError, KeyError):
    pass


class NumericalError(FSLError):
    """Non-finite values or failed factorizations (CLI exit code 4)."""


class NotPositiveDefiniteError(NumericalError):
    pass


class DimensionError(FSLError, ValueError):
    pass


class ContractError(FSLError, ValueError):
    pass
