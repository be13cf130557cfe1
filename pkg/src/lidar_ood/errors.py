"""Exception hierarchy shared by every module of the toolkit."""


class LidarOodError(Exception):
    """Base class for all toolkit errors."""


class DataError(LidarOodError):
    """Malformed or inconsistent input data (maps to CLI exit code 2)."""


class TruncatedFile(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class UnknownCategory(ParseError):
    pass


class DimensionMismatch(DataError):
    pass


DimMismatch = DimensionMismatch


class DetectorFailure(LidarOodError):
    pass


class EmptyTarget(DataError):
    pass


class DegenerateIntensity(DataError):
    pass


class EmptyDatabaseClass(DataError):
    pass


class DegenerateData(DataError):
    pass


class NonIntegerScale(DataError):
    pass


class MissingLayer(DataError):
    pass


class MissingAnchorIndex(DataError):
    pass


class NonFiniteActivation(LidarOodError):
    pass


class NonFiniteGradient(LidarOodError):
    pass


class EmptySamples(DataError):
    pass


class InsufficientSamples(DataError):
    pass


class SingleClassSet(DataError):
    pass


class EmptyStratum(DataError):
    pass


class EmptyThresholds(DataError):
    pass
