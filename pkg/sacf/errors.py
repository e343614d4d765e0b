"""
SACF Error Hierarchy
Every failure the CLI can report carries its own exit code
"""

from typing import Optional


class SacfError(Exception):
    """Base class for all SACF failures."""

    exit_code = 1


# ============== INPUT / VALIDATION (exit 2) ==============

class InputError(SacfError):
    """Bad input: malformed files, invalid configs, missing artifacts."""

    exit_code = 2


class MalformedRecordError(InputError):
    """A JSONL line could not be parsed."""

    def __init__(self, path: str, line_number: int, detail: str):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}: line {line_number}: malformed JSON ({detail})")


class InvariantViolation(InputError):
    """A record violates a data-model invariant."""

    def __init__(self, invariant: str, detail: str = "", frame_id: Optional[str] = None):
        self.invariant = invariant
        self.detail = detail
        self.frame_id = frame_id
        prefix = f"frame {frame_id!r}: " if frame_id is not None else ""
        suffix = f" ({detail})" if detail else ""
        super().__init__(f"{prefix}violates {invariant}{suffix}")


class DimensionMismatchError(InputError):
    """Two grids that must agree in shape do not."""

    def __init__(self, expected, actual, what: str = "grid"):
        super().__init__(f"{what} dimension mismatch: expected {tuple(expected)}, got {tuple(actual)}")


class PlacementError(InputError):
    """Scene generator could not place entities within its retry budget."""

    def __init__(self, limit: str, retries: int):
        self.limit = limit
        super().__init__(
            f"could not place scene entities after {retries} retries; "
            f"config limit {limit} is too crowded for the grid"
        )


class EmptySplitError(InputError):
    """A split needed for training or evaluation has no frames."""


class MissingArtifactError(InputError):
    """A model, dataset or prediction file the command needs is absent."""


# ============== NUMERICAL / TRAINING (exit 3) ==============

class NumericalError(SacfError):
    """Numerical failure during training or scoring."""

    exit_code = 3


class TrainingDivergedError(NumericalError):
    """Loss became non-finite."""

    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")


class SingleClassSplitError(NumericalError):
    """Gate training needs both Face and Not-face frames."""

    def __init__(self, label: int, n_frames: int):
        name = "Face" if label == 1 else "Not-face"
        super().__init__(f"single-class split: all {n_frames} frames are {name}")


class DegenerateMarginalsError(NumericalError):
    """Kappa is undefined: chance agreement is 1 but observed agreement is not."""
