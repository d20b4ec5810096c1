"""Exceptions raised by the skinseg package."""

from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .train import TrainRecord


class SkinSegError(Exception):
    """Base class for every error raised by skinseg."""


class ContractError(SkinSegError, ValueError):
    """A caller violated an operation's precondition."""


class ShapeMismatchError(ContractError):
    """Arrays that must share dimensions do not."""


class ChannelMismatchError(ContractError):
    """An input has the wrong number of channels."""


class EmptyClassError(ContractError):
    """A histogram class has no pixels, so the posterior is undefined."""


class EmptyInputError(ContractError):
    """An operation received an empty collection."""


class EnsembleSpecError(ContractError):
    """An ensemble specification is invalid or inconsistent with its models."""


class ImageParseError(SkinSegError):
    """A PPM/PGM byte stream could not be decoded."""


class HeaderError(ImageParseError):
    """The netpbm header is malformed."""


class TruncatedPayloadError(ImageParseError):
    """The pixel payload is shorter than the header declares."""


class UnsupportedMaxvalError(ImageParseError):
    """The header declares a maxval other than 255."""


class ArtifactFormatError(SkinSegError):
    """A binary artifact file is malformed."""


class HistogramFileError(ArtifactFormatError):
    """A BCH1 histogram file is malformed."""


class WeightFileError(ArtifactFormatError):
    """A SKNW weight file is malformed."""

    def __init__(self, message: str, slot: str | None = None) -> None:
        """Initialize the error, remembering the slot being read if any."""
        super().__init__(message)
        self.slot = slot


class GraphError(SkinSegError):
    """The autodiff graph was used outside its contract."""


class NonFiniteError(GraphError):
    """A NaN or Inf reached an operation boundary."""


class TrainingDivergedError(SkinSegError):
    """The training loss became non-finite."""

    def __init__(self, message: str, record: TrainRecord) -> None:
        """Initialize the error with the partial training record."""
        super().__init__(message)
        self.record = record


class InvariantError(SkinSegError):
    """An internal invariant was violated."""
