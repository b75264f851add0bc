"""Exception types shared across the toolkit.

Everything derives from CapkitError so callers (the CLI in particular) can
separate input-validation failures from numerical failures with two except
clauses instead of a dozen.
"""

from __future__ import annotations


class CapkitError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(CapkitError):
    """Bad input: malformed files, shape mismatches, contract violations."""


class NumericalError(CapkitError):
    """Math went bad: NaN/Inf, divergence."""


# numerics
class ShapeMismatch(ValidationError):
    pass


class NonFinite(NumericalError):
    pass


class DisconnectedGraph(ValidationError):
    pass


# textpipe
class SpecialTokenCollision(ValidationError):
    pass


class EmptyCorpus(ValidationError):
    pass


# vision
class MalformedHeader(ValidationError):
    pass


class TruncatedPayload(ValidationError):
    pass


class ImageTooSmall(ValidationError):
    pass


class BadMagic(ValidationError):
    pass


class UnsupportedVersion(ValidationError):
    pass


class DuplicateImageId(ValidationError):
    pass


# transformer
class TooManySources(ValidationError):
    pass


class PrefixTooLong(ValidationError):
    pass


# decode: reuses ValidationError directly


# metrics
class MismatchedIds(ValidationError):
    pass


# ensemble
class EmptyMatrix(ValidationError):
    pass


class MissingReferences(ValidationError):
    pass


class TooFewCandidates(ValidationError):
    pass


class UnknownMode(ValidationError):
    pass


# train
class LengthMismatch(ValidationError):
    pass


class EmptySplit(ValidationError):
    pass
