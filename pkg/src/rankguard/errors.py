"""Exception hierarchy shared by every module."""


class RankGuardError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class ParseError(RankGuardError):
    def __init__(self, message, row=None, cell=None):
        super().__init__(message)
        self.row = row
        self.cell = cell


class EmptyInput(RankGuardError):
    pass


class RankOutOfRange(RankGuardError):
    pass


class SingularValueUnderflow(RankGuardError):
    pass


class ShapeError(RankGuardError):
    pass


class InvalidScale(RankGuardError):
    pass


class InvalidAlpha(RankGuardError):
    pass


class DegenerateInput(RankGuardError):
    pass


class InsufficientValues(RankGuardError):
    pass


class EmptyErrors(RankGuardError):
    pass


class NoValidHoldouts(RankGuardError):
    pass


class DomainError(RankGuardError):
    pass


class ZeroScaleColumn(UserWarning):
    """Warning category: a column had zero MAD and fell back to scale 1."""


class DivisionByZero(RankGuardError):
    pass


class NetworkError(RankGuardError):
    pass


class CorruptData(RankGuardError):
    pass
