class GceError(Exception):
    """Base class for every error raised by this package."""


class ContractError(GceError, ValueError):
    pass


class DimensionError(GceError, ValueError):
    pass


class IndexBoundsError(GceError, IndexError):
    pass


class CodecError(GceError, ValueError):
    pass


class LoadError(GceError, ValueError):
    pass


class SmilesParseError(GceError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class ConversionError(GceError, ValueError):
    pass


class NumericError(GceError, ArithmeticError):
    pass


class ConfigurationError(GceError, ValueError):
    pass


class TransferError(GceError, ValueError):
    pass


class CheckpointError(GceError, ValueError):
    pass


class DataError(GceError, ValueError):
    pass
