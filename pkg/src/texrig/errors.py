"""Exception hierarchy shared by every texrig module."""


class TexrigError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 2


class DataError(TexrigError):
    exit_code = 2


class NumericError(TexrigError):
    exit_code = 3


class InvalidMesh(DataError):
    pass


class TopologyMismatch(DataError):
    pass


class DegenerateFace(DataError):
    def __init__(self, face_index, area=None, which=""):
        self.face_index = int(face_index)
        self.area = area
        msg = f"face {self.face_index} is degenerate"
        if which:
            msg += f" in the {which} mesh"
        if area is not None:
            msg += f" (area {area:.3e})"
        super().__init__(msg)


class IndexOutOfRange(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class ImageTooSmall(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingUV(ParseError):
    pass


class ConfigError(DataError):
    pass


class NoSeams(DataError):
    pass


class AllNeighborsInvalid(NumericError):
    def __init__(self, texel=None, message=None):
        self.texel = texel
        super().__init__(message or f"all bilinear neighbours invalid at texel {texel}")


class ZeroQuaternion(NumericError):
    def __init__(self, texel=None):
        self.texel = texel
        super().__init__(f"quaternion norm below 1e-8 at texel {texel}")


class NonPSD(NumericError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, iteration, value=None):
        self.iteration = int(iteration)
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
