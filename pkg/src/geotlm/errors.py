"""Exception hierarchy shared by all geotlm modules."""


class GeoTlmError(Exception):
    pass


# geo anchors
class DegenerateBox(GeoTlmError, ValueError):
    pass


class GridTooSmall(GeoTlmError, ValueError):
    pass


class OutOfBox(GeoTlmError, ValueError):
    pass


class OutOfBounds(GeoTlmError, ValueError):
    pass


class YearUnavailable(GeoTlmError, KeyError):
    pass


# tensors / tlm
class DimensionMismatch(GeoTlmError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class EmptyPriors(GeoTlmError, ValueError):
    pass


class FormatError(GeoTlmError, ValueError):
    """A binary container failed magic/size validation."""


# training
class CorruptCheckpoint(FormatError):
    pass


class FrozenGroupMutated(GeoTlmError, AssertionError):
    pass


class EmptyMask(GeoTlmError, ValueError):
    pass


# metrics
class InvalidBox(GeoTlmError, ValueError):
    pass


class EmptyGroundTruth(GeoTlmError, ValueError):
    pass


class UnknownClass(GeoTlmError, KeyError):
    pass


# datasets
class ParseError(GeoTlmError, ValueError):
    def __init__(self, problems):
        # problems: list of (line_number, message)
        self.problems = list(problems)
        lines = "; ".join(f"line {n}: {msg}" for n, msg in self.problems)
        super().__init__(f"{len(self.problems)} invalid record(s): {lines}")


class MissingFile(GeoTlmError, FileNotFoundError):
    pass
