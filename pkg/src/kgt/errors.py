"""Exception hierarchy shared by every kgt module."""


class KGTError(Exception):
    """Base class for all errors raised by kgt."""


class DimensionError(KGTError, ValueError):
    pass


class ConfigurationError(KGTError, ValueError):
    pass


class IntegrityError(KGTError, ValueError):
    """Bookkeeping fields of a structure disagree with each other."""


class DegenerateRowError(KGTError, ValueError):
    """A softmax row had every entry masked out (empty neighbor set)."""


class NonFiniteError(KGTError, FloatingPointError):
    pass


class EvaluationError(KGTError):
    pass


class InputError(KGTError, ValueError):
    pass


class DivergenceError(KGTError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class CheckpointError(KGTError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class PGMError(KGTError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class PGMMagicError(PGMError):
    pass


class PGMMaxvalError(PGMError):
    pass


class PGMTruncatedError(PGMError):
    pass


class ConfigParseError(KGTError, ValueError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnknownKeyError(ConfigParseError):
    pass


class ValueParseError(ConfigParseError):
    pass
