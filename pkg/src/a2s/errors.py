"""Exception hierarchy shared across the toolkit.

``DataError`` and its subclasses mean "your inputs are wrong" and map to
exit code 3 in the CLI; everything else under ``ArrangerError`` is an
internal/contract failure (exit code 1).
"""


class ArrangerError(Exception):
    """Base class for all toolkit errors."""


class DataError(ArrangerError):
    """Malformed or missing input data (files, annotations, shards)."""


class MalformedRoll(ArrangerError):
    """Piano-roll violates the sustain-continuity invariant."""


class InsufficientBeats(DataError):
    """Beat grid too short to cover the requested 8-beat window."""


class NonDownbeatStart(DataError):
    """Segment start beat is not annotated as a downbeat."""


class AlignmentError(DataError):
    """MIDI and audio beat annotations disagree beyond tolerance."""


class AnnotationGap(DataError):
    """A segment lacks chord or beat coverage."""


class BackendUnavailable(DataError):
    """Requested transcriber backend cannot be constructed (missing weights)."""


class ShapeError(ArrangerError):
    """Tensor input has the wrong shape."""


class ContractViolation(ArrangerError):
    """An interface contract (lengths, dimensions, value ranges) was broken."""


class MissingContext(ArrangerError):
    """Autoregressive corruption requested without a previous segment."""


class ResumeMismatch(ArrangerError):
    """Checkpoint is incompatible with the current run configuration."""


class CheckpointStageError(ArrangerError):
    """Checkpoint never reached the curriculum stage required by the caller."""


class ConfigMismatch(ArrangerError):
    """Checkpoint config does not match the requested model/ablation config."""


class LengthMismatch(DataError):
    """Evaluation inputs have different segment counts."""


class UsageError(ArrangerError):
    """Bad command-line usage detected after argparse (exit code 2)."""
