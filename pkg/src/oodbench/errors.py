"""Exception hierarchy shared across the package."""


class OodBenchError(Exception):
    """Base class for all errors raised by oodbench."""


class NotPositiveDefinite(OodBenchError, ValueError):
    pass


class PoolTooSmall(OodBenchError, ValueError):
    pass


class EmptyClass(OodBenchError, ValueError):
    pass


class DimensionMismatch(OodBenchError, ValueError):
    pass


class DomainError(OodBenchError, ValueError):
    pass


class BadFractions(OodBenchError, ValueError):
    pass


class TooFewSamples(OodBenchError, ValueError):
    pass


class BadSpec(OodBenchError, ValueError):
    pass


class BadPartitionCount(OodBenchError, ValueError):
    pass


class EmptyInput(OodBenchError, ValueError):
    pass


class SchemaError(OodBenchError, ValueError):
    """Malformed external data; the message names the offending row or byte offset."""


class DegenerateData(OodBenchError, ValueError):
    pass


class DivergedLoss(OodBenchError, RuntimeError):
    pass


class MissingModel(OodBenchError, ValueError):
    pass


class SingleClassValidation(OodBenchError, ValueError):
    pass


class SingleClassInput(OodBenchError, ValueError):
    pass


class TooFewValues(OodBenchError, ValueError):
    pass


class ConfigError(OodBenchError, ValueError):
    def __init__(self, key, reason):
        self.key = key
        self.reason = reason
        super().__init__(f"{key}: {reason}")
