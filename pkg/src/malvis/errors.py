"""Exception types shared across the toolkit.

ValidationError subclasses signal bad user input (CLI exit code 1);
everything else is a runtime failure (exit code 2).
"""


class MalvisError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(MalvisError):
    """Malformed config, spec, manifest, file or argument."""


# container format / corpus
class TruncatedInput(ValidationError):
    """Container header declares more bytes than are present."""


class InvalidSpec(ValidationError):
    """Family spec is unusable (empty motif, inverted size band, ...)."""


class MissingFile(ValidationError):
    pass


class DuplicateId(ValidationError):
    pass


class BadParent(ValidationError):
    """parent_id does not resolve to a base entry."""


# imaging
class EmptyInput(ValidationError):
    pass


class EmptyList(ValidationError):
    pass


# model
class ShapeMismatch(MalvisError):
    pass


class MissingTrace(MalvisError):
    """Backward pass requested without a cached forward trace."""


class NonFiniteLoss(MalvisError):
    """Training loss became NaN/inf; abort signal."""


class BadMagic(MalvisError):
    pass


class VersionMismatch(MalvisError):
    pass


class ChecksumError(MalvisError):
    pass


# obfuscation
class NotPacked(MalvisError):
    pass


class CorruptStream(MalvisError):
    """Compressed byte stream cannot be decoded."""


# explainability
class WindowTooLarge(ValidationError):
    pass


class TooManySegments(ValidationError):
    pass


class TooManySegmentsForExact(TooManySegments):
    pass


class MixedMethods(ValidationError):
    """Heatmaps being combined disagree on method/class/resolution."""


# experiment harness
class EmptyTestSet(ValidationError):
    pass


class ClassTooSmall(ValidationError):
    pass


class ConfigError(ValidationError):
    pass
