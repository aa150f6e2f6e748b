"""Exception types shared across the package."""


class FedSegError(Exception):
    """Base class for all package errors."""


class ShapeError(FedSegError, ValueError):
    pass


class ParameterError(FedSegError, ValueError):
    pass


class DegenerateBatchError(FedSegError, ValueError):
    """Batch-norm in train mode was given fewer than two samples."""


class UsageError(FedSegError, ValueError):
    pass


class AlignmentError(FedSegError, ValueError):
    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


class ConfigError(FedSegError, ValueError):
    pass


class FormatError(FedSegError, ValueError):
    """A file on disk does not follow its binary or manifest layout."""


class DatasetIOError(FedSegError, OSError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class GenerationError(FedSegError, RuntimeError):
    pass


class ProtocolError(FedSegError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TransportError(FedSegError, ConnectionError):
    pass


class RoundTimeout(FedSegError, TimeoutError):
    def __init__(self, round_no, node_ids):
        nodes = ", ".join(str(n) for n in node_ids)
        super().__init__(f"round {round_no}: no response from node(s) {nodes}")
        self.round = round_no
        self.node_ids = list(node_ids)
