"""Exception hierarchy. Each family maps to a CLI exit code."""


class ForgetdError(Exception):
    exit_code = 1


class ConfigError(ForgetdError):
    """Bad configuration: unknown keys, invalid values, incompatible layers."""


class UsageError(ForgetdError):
    """An operation was called in a way its contract forbids."""


class InputError(ForgetdError):
    """Malformed or empty runtime input (labels, selectors, batches)."""


class IntegrityError(ForgetdError):
    """Corrupted or mismatched persisted state."""

    exit_code = 3


class IngestionError(IntegrityError):
    """IDX files that cannot be parsed."""


class IdxMagicError(IngestionError):
    pass


class IdxCountError(IngestionError):
    pass


class IdxTruncatedError(IngestionError):
    pass


class FormatError(IntegrityError):
    """Checkpoint or ledger file that fails validation."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class FingerprintMismatchError(IntegrityError):
    pass


class LedgerLookupError(ForgetdError, KeyError):
    """An (epoch, batch) pair that the ledger does not hold."""

    def __str__(self):
        return Exception.__str__(self)


class DuplicateRecordError(IntegrityError):
    pass
