# exceptions.py
class DistillkitError(Exception):
    """Base class for every error raised by the toolkit."""

    def __init__(self, message="The distillation toolkit failed."):
        self.message = message
        super().__init__(self.message)


class ConfigError(DistillkitError):
    """Exception raised when a configuration value is invalid."""

    def __init__(self, message="The configuration is invalid."):
        super().__init__(message)


class UsageError(DistillkitError):
    """Exception raised when an operation is called out of contract."""

    def __init__(self, message="The operation was used incorrectly."):
        super().__init__(message)


class DataError(DistillkitError):
    """Exception raised when input data is inconsistent."""

    def __init__(self, message="The input data is inconsistent.", missing_ids=None):
        self.missing_ids = list(missing_ids) if missing_ids else []
        super().__init__(message)


class TooShortError(DataError):
    """Exception raised when an utterance is shorter than the required length."""

    def __init__(self, message="The utterance is too short."):
        super().__init__(message)


class EmptyAfterVadError(DataError):
    """Exception raised when voice activity detection removes every frame."""

    def __init__(self, message="No frames left after voice activity detection."):
        super().__init__(message)


class MissingIdError(DataError, KeyError):
    """Exception raised when an utterance id is not in a store."""

    def __init__(self, utt_id):
        self.utt_id = utt_id
        super().__init__(f"Missing id: {utt_id!r}", missing_ids=[utt_id])

    def __str__(self):
        return self.message


class BatchError(DataError):
    """Exception raised when a teacher/student batch is malformed."""

    def __init__(self, message="The embedding batch is malformed."):
        super().__init__(message)


class DegenerateInputError(DataError):
    """Exception raised when a vector has (near) zero norm."""

    def __init__(self, message="Degenerate input: zero-norm vector."):
        super().__init__(message)


class FormatError(DistillkitError):
    """Exception raised when a binary file cannot be parsed."""

    def __init__(self, message="The file could not be parsed.", offset=None, record_index=None):
        self.offset = offset
        self.record_index = record_index
        details = []
        if record_index is not None:
            details.append(f"record {record_index}")
        if offset is not None:
            details.append(f"byte offset {offset}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
