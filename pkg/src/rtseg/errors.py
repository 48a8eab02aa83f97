"""Exception hierarchy for the toolkit.

Each failure mode callers may branch on gets its own class; the CLI maps
any :class:`RtsegError` to exit code 2 (data error).
"""

from __future__ import annotations


class RtsegError(Exception):
    """Base class for every toolkit-raised error."""


class ValidationError(RtsegError):
    """A domain object violates one of its declared invariants."""


class UnknownLabelError(RtsegError):
    """A label is used that the mask does not declare."""

    def __init__(self, label: int, known, context: str = ""):
        self.label = int(label)
        self.known = tuple(known)
        msg = f"unknown label {self.label}; declared labels are {list(self.known)}"
        if context:
            msg = f"{context}: {msg}"
        super().__init__(msg)


class GeometryMismatchError(RtsegError):
    """Two grids that must share one voxel lattice do not.

    Carries both geometries so callers can report the exact disagreement.
    """

    def __init__(self, left, right, context: str = ""):
        self.left = left
        self.right = right
        msg = f"incompatible geometries: {left} vs {right}"
        if context:
            msg = f"{context}: {msg}"
        super().__init__(msg)


class NiftiFormatError(RtsegError):
    """Corrupt or unsupported NIfTI-1 header."""


class UnsupportedDatatypeError(NiftiFormatError):
    """NIfTI datatype code outside the supported set."""


class DataLengthError(NiftiFormatError):
    """Voxel payload shorter than the header's dimensions require."""


class NonIntegralMaskError(RtsegError):
    """A mask voxel is not integral within tolerance."""

    def __init__(self, value: float, index: tuple[int, int, int], path=""):
        self.value = float(value)
        self.index = tuple(index)
        where = f" in {path}" if path else ""
        super().__init__(
            f"non-integral mask value {self.value!r} at voxel {self.index}{where}"
        )


class NiftiWriteError(RtsegError):
    """Target path could not be written."""


class DegenerateCohortError(RtsegError):
    """Aggregated Dice is undefined: every mask in the cohort is empty."""


class CropBoundsError(RtsegError):
    """A cropped map placed at its offset does not fit the target lattice."""

    def __init__(self, axis: str, offset: int, size: int, target: int):
        self.axis = axis
        super().__init__(
            f"crop exceeds target bounds on axis {axis}: "
            f"offset {offset} + size {size} > target {target}"
        )


class ScoringError(RtsegError):
    """Per-case scoring failure, with the case identified."""

    def __init__(self, case_id: str, cause: Exception):
        self.case_id = case_id
        super().__init__(f"case {case_id!r}: {cause}")


class AssemblyError(RtsegError):
    """Dataset layout cannot be built from the given cohort."""
