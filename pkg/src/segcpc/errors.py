"""Exception hierarchy shared across the package.

Two branches matter to callers: :class:`DataError` covers bad or missing
input (corpora, manifests, alignments, feature files) and maps to CLI exit
code 2, while :class:`RuntimeFailure` covers failures that arise during
training or inference and maps to exit code 3.
"""


class SegcpcError(Exception):
    """Base class for every error raised by this package."""


class DataError(SegcpcError):
    """Invalid, inconsistent, or missing input data."""


class RuntimeFailure(SegcpcError):
    """Failure while running a model (training or inference)."""


class MissingFile(DataError):
    """A path referenced by a manifest or command does not exist."""


class MalformedManifest(DataError):
    """A manifest line does not have the expected fields."""


class MalformedAlignment(DataError):
    """An alignment line could not be parsed."""


class NonMonotoneAlignment(DataError):
    """Alignment intervals overlap or run backwards."""


class NegativeDuration(DataError):
    """An alignment interval ends at or before its start."""


class UnknownLabel(DataError):
    """A phone label is not present in the fold table."""


class UnsupportedAudio(DataError):
    """Audio is not 16 kHz mono 16-bit PCM; resampling is out of scope."""


class EmptyCorpus(DataError):
    """A corpus or manifest contains no usable utterances."""


class EmptyValidation(DataError):
    """Tuning was requested but the validation set is empty."""


class MissingAlignment(DataError):
    """An operation needs reference alignments the utterance lacks."""


class NoReferenceBoundaries(DataError):
    """Scoring was requested against an empty reference boundary set."""


class InconsistentLengths(DataError):
    """Segment lengths do not add up to the stated frame count."""


class LabelFeatureMismatch(DataError):
    """Feature rows and frame labels disagree in length."""


class TooShortUtterance(DataError):
    """The waveform is shorter than the encoder receptive field."""


class DegenerateUtterance(DataError):
    """Too few frames or segments for the requested loss."""


class EmptyPool(RuntimeFailure):
    """Negative sampling was asked to draw from an empty candidate pool."""


class DivergedTraining(RuntimeFailure):
    """A training loss became non-finite."""
