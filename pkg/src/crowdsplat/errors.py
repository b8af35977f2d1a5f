"""Exception hierarchy shared by all pipeline stages."""


class CSSError(Exception):
    """Base class for every error raised by crowdsplat."""


class BehindCamera(CSSError):
    pass


class NonPositiveDepth(CSSError):
    pass


class ZeroVector(CSSError):
    pass


class DimensionMismatch(CSSError):
    pass


class EmptyMatches(CSSError):
    pass


class DisconnectedGraph(CSSError):
    pass


class DivergedLoss(CSSError):
    pass


class TooFewPoints(CSSError):
    pass


class EmptySplatSet(CSSError):
    pass


class IndexOutOfRange(CSSError):
    pass


class DegenerateMap(CSSError):
    pass


class ImageTooSmall(CSSError):
    pass


class ConfigError(CSSError):
    pass


class MissingStageOutput(CSSError):
    pass


class IoError(CSSError):
    pass
