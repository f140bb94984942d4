"""Exception and warning types shared across the package."""

from __future__ import annotations


class PmmError(Exception):
    """Base class for all package errors."""


class HermiticityError(PmmError):
    """Matrix violates the Hermiticity requirement."""


class ModeMismatchError(PmmError):
    """Packed mode incompatible with the matrix content (e.g. complex
    off-diagonals packed as real-symmetric)."""


class PackedLengthError(PmmError):
    """Packed value vector has the wrong length for its dim/mode."""


class EigenConvergenceError(PmmError):
    """Eigensolver failed to converge; message carries condition diagnostics."""


class NonUnitaryError(PmmError):
    """Matrix fails the unitarity check."""


class DegenerateLevelError(PmmError):
    """Requested eigenvalue is too close to a neighbor for an analytic
    derivative; carries the offending gap."""

    def __init__(self, message: str, gap: float):
        super().__init__(message)
        self.gap = gap


class DatasetError(PmmError):
    """Dataset contents are inconsistent with their declared shape."""


class ImageFormatError(PmmError):
    """IDX image/label file is missing, truncated, or mislabeled."""


class ConfigError(PmmError):
    """Experiment configuration is malformed or carries unknown fields."""


class PresetError(PmmError):
    """Unknown experiment or dataset preset name."""


class TrainingDivergedError(PmmError):
    """Loss became non-finite during training; message carries the epoch and
    step size."""


class PhaseWrapWarning(UserWarning):
    """An extracted eigenphase is close to the +-pi branch cut; energies may
    be aliased."""
