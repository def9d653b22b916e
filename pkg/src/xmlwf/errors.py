"""Exception hierarchy shared across the workbench.

Every error raised on a contract violation subclasses XmlwfError so callers
(and the CLI exit-code mapping) can catch one base type.
"""


class XmlwfError(Exception):
    pass


# --- dataset ---

class MissingTarget(XmlwfError):
    pass


class ParseError(XmlwfError):
    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column


class NonBinaryTarget(XmlwfError):
    pass


class EmptyData(XmlwfError):
    pass


class DegenerateSplit(XmlwfError):
    pass


class TooFewPerClass(XmlwfError):
    pass


# --- pipeline ---

class InvalidSpec(XmlwfError):
    """Pipeline/estimator declaration violates its schema (unknown name,
    out-of-range value, bad transformer order)."""


class NaNWithoutImputer(XmlwfError):
    pass


class SingleClassTrain(XmlwfError):
    pass


class NonFiniteLoss(XmlwfError):
    pass


class DimensionMismatch(XmlwfError):
    pass


class BadMagic(XmlwfError):
    pass


class UnsupportedVersion(XmlwfError):
    pass


class TruncatedBlob(XmlwfError):
    pass


# --- search ---

class LengthMismatch(XmlwfError):
    pass


class OneClassAUC(XmlwfError):
    pass


class EmptyGrid(XmlwfError):
    pass


class EmptySpace(XmlwfError):
    pass


# --- tracking ---

class BadSlug(XmlwfError):
    pass


class Conflict(XmlwfError):
    pass


class StoreIO(XmlwfError):
    pass


class StateError(XmlwfError):
    pass


class NotFound(XmlwfError):
    pass


class HashMismatch(XmlwfError):
    pass


# --- explain / report ---

class TooManyFeatures(XmlwfError):
    pass


class SingularSystem(XmlwfError):
    pass


class EmptySelection(XmlwfError):
    pass


# --- cli ---

class ConfigError(XmlwfError):
    pass
