"""Exception hierarchy shared by every module.

The CLI maps any ``NegGroundingError`` to exit code 1; argparse owns exit 2.
"""


class NegGroundingError(Exception):
    """Base class for all domain errors."""

    exit_code = 1


# --- textparse ---
class EmptyCaption(NegGroundingError):
    """Caption is blank after trimming."""


# --- negtome / embeddings ---
class DimensionMismatch(NegGroundingError):
    """Array shapes disagree with each other or with the caption."""


class NonFiniteInput(NegGroundingError):
    """An input array holds NaN or Inf."""


class EmptySequence(NegGroundingError):
    """Pooling over zero rows."""


class NoCue(NegGroundingError):
    """No negated phrase in the caption."""


class MultipleNegatedPhrases(NegGroundingError):
    """More than one negated phrase where exactly one is required."""


class ZeroAlignment(NegGroundingError):
    """Probe is not positively aligned with the cue vector."""


class FormatError(NegGroundingError):
    """Malformed embedding, checkpoint or record file."""


# --- adapter ---
class UnknownScheme(NegGroundingError):
    """Placement scheme is not shallow, strided or deep."""


class ShapeMismatch(NegGroundingError):
    """Attention tensor and word classes disagree."""


class RowNotNormalized(NegGroundingError):
    """An attention row does not sum to one."""


# --- metrics ---
class InvalidBox(NegGroundingError):
    """Box is degenerate or non-finite."""


class MixedImages(NegGroundingError):
    """Detections from more than one image passed to per-image NMS."""


class NoPositiveQueries(NegGroundingError):
    """No query has a ground-truth box."""


class NoNegativeQueries(NegGroundingError):
    """No (image, query) pair has empty ground truth."""


class EmptyCandidates(NegGroundingError):
    """Fewer than two MCQ candidates."""


# --- pipeline ---
class NoEligibleRegions(NegGroundingError):
    """Image rejected or holds no usable box."""


class BoxOutOfBounds(NegGroundingError):
    """Box extends outside the image."""


class TooManyInstances(NegGroundingError):
    """More siblings than available label letters."""


class ClientError(NegGroundingError):
    """Transport failure talking to a model client."""


class SchemaError(NegGroundingError):
    """Model reply does not match the expected structure."""


class VerificationFailed(NegGroundingError):
    """Generated captions failed the local checks."""

    def __init__(self, message, reasons=()):
        super().__init__(message)
        self.reasons = list(reasons)


class RetryExhausted(NegGroundingError):
    """Generation kept failing until the retry limit."""


class UnparsableAnswer(NegGroundingError):
    """Model answer outside the allowed vocabulary."""


class EmptyCorpus(NegGroundingError):
    """Statistics requested over zero captions."""


# --- config ---
class MalformedConfig(NegGroundingError):
    """Config file is not a JSON object or holds invalid values."""


class UnknownKey(MalformedConfig):
    """Config names a key ToolConfig does not define."""
