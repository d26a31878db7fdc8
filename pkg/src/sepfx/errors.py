"""Exception hierarchy.

Every error carries an exit code so the command-line layer can map
failures without inspecting messages: 2 for bad input data or config,
3 for numeric failures, 4 for diagnostic rejections under --strict.
"""


class SepfxError(Exception):
    exit_code = 1


class DataError(SepfxError):
    exit_code = 2


class NumericError(SepfxError):
    exit_code = 3


class ConfigError(DataError):
    """Config document failed schema validation or could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = []
        if path:
            where.append(f"key '{path}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"config error at {', '.join(where)}: " if where else "config error: "
        super().__init__(prefix + message)


class SchemaError(DataError):
    pass


class EmptySubset(DataError):
    pass


class InvalidLaw(DataError):
    pass


class DegenerateOracle(NumericError):
    pass


class NoRiskSet(DataError):
    pass


class RankDeficient(NumericError):
    pass


class Separation(NumericError):
    pass


class NonConvergence(NumericError):
    pass


class MissingPredictor(DataError):
    pass


class MissingNuisance(DataError):
    pass


class NoSurvivors(DataError):
    pass


class ExtremePositivity(NumericError):
    pass


class MismatchedAD(DataError):
    pass


class TooLarge(DataError):
    pass


class PositivityViolation(NumericError):
    """A cell required by the identification sums has (near) zero probability.

    ``cell`` is a tuple ``(k, history, arm)`` where ``history`` is the tuple
    of baseline values followed by the time-varying values through time k.
    """

    def __init__(self, message, cell=None):
        self.cell = cell
        super().__init__(message)


class TooManyFailures(NumericError):
    pass


class InsufficientData(DataError):
    pass


class DiagnosticsRejected(SepfxError):
    exit_code = 4
