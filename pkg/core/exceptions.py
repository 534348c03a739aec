class MecformerError(Exception):
    """Base class for every error raised by the project."""


class DimensionError(MecformerError):
    pass


class ContractError(MecformerError):
    pass


class NumericError(MecformerError):
    pass


class ConfigError(MecformerError):
    pass


class VocabularyError(MecformerError):
    pass


class BagFormatError(MecformerError):
    pass


class BadMagicError(BagFormatError):
    pass


class ShapeOverflowError(BagFormatError):
    pass


class TruncatedPayloadError(BagFormatError):
    pass


class IngestionError(MecformerError):
    pass


class SplitError(MecformerError):
    pass


class IncompatibilityError(MecformerError):
    pass
