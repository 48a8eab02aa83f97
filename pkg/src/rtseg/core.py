"""Voxel-lattice data model and exact integer set operations.

Axis convention: a grid's value array has shape ``dims`` and
``values[x, y, z]`` addresses voxel (x, y, z) with the *first* axis the
fastest-varying one, i.e. flattening and on-disk layout use Fortran
order. Every container is frozen after construction (arrays are made
read-only) so instances can be shared freely across workers.

All counting operations return exact Python integers accumulated at
64-bit width or better, so results are identical regardless of
evaluation order or parallelisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryMismatchError, UnknownLabelError, ValidationError

# Tolerance for comparing spacing / origin (mm) and direction cosines.
GEOMETRY_TOL = 1e-4

IDENTITY_DIRECTION = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
)

DEFAULT_LABELS = (1, 2)  # 1 = GTVp, 2 = GTVn


def _as_triple(value, kind, name: str) -> tuple:
    try:
        out = tuple(kind(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name} must be three {kind.__name__}s: {value!r}") from exc
    if len(out) != 3:
        raise ValidationError(f"{name} must have exactly 3 components, got {len(out)}")
    return out


@dataclass(frozen=True)
class Geometry:
    """Physical placement of a voxel lattice.

    ``direction`` holds axis cosines as a 3x3 row-major matrix whose
    *columns* are the world-space unit vectors of the voxel axes.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: tuple = IDENTITY_DIRECTION

    def __post_init__(self):
        object.__setattr__(self, "dims", _as_triple(self.dims, int, "dims"))
        object.__setattr__(self, "spacing", _as_triple(self.spacing, float, "spacing"))
        object.__setattr__(self, "origin", _as_triple(self.origin, float, "origin"))
        if any(d < 1 for d in self.dims):
            raise ValidationError(f"dims must all be >= 1, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must all be > 0, got {self.spacing}")
        rows = tuple(_as_triple(row, float, "direction row") for row in self.direction)
        if len(rows) != 3:
            raise ValidationError("direction must be a 3x3 matrix")
        object.__setattr__(self, "direction", rows)
        for j in range(3):
            norm = math.sqrt(sum(rows[i][j] ** 2 for i in range(3)))
            if abs(norm - 1.0) > GEOMETRY_TOL:
                raise ValidationError(
                    f"direction column {j} has norm {norm:.6f}, expected 1 within {GEOMETRY_TOL}"
                )

    @property
    def voxel_count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def direction_matrix(self) -> np.ndarray:
        return np.array(self.direction, dtype=np.float64)

    @property
    def affine(self) -> np.ndarray:
        """4x4 voxel-index -> world-mm transform."""
        aff = np.eye(4, dtype=np.float64)
        aff[:3, :3] = self.direction_matrix @ np.diag(self.spacing)
        aff[:3, 3] = self.origin
        return aff

    @classmethod
    def from_affine(cls, affine: np.ndarray, dims) -> "Geometry":
        aff = np.asarray(affine, dtype=np.float64)
        if aff.shape != (4, 4):
            raise ValidationError(f"affine must be 4x4, got {aff.shape}")
        rs = aff[:3, :3]
        spacing = np.linalg.norm(rs, axis=0)
        if np.any(spacing <= 0):
            raise ValidationError("affine has a zero-length column")
        direction = rs / spacing
        return cls(
            dims=tuple(dims),
            spacing=tuple(float(s) for s in spacing),
            origin=tuple(float(v) for v in aff[:3, 3]),
            direction=tuple(tuple(float(v) for v in row) for row in direction),
        )


def geometry_compatible(a: Geometry, b: Geometry, tol: float = GEOMETRY_TOL) -> bool:
    """True iff the lattices agree: equal dims, spacing/origin/direction within tol."""
    if a.dims != b.dims:
        return False
    if any(abs(x - y) > tol for x, y in zip(a.spacing, b.spacing)):
        return False
    if any(abs(x - y) > tol for x, y in zip(a.origin, b.origin)):
        return False
    for ra, rb in zip(a.direction, b.direction):
        if any(abs(x - y) > tol for x, y in zip(ra, rb)):
            return False
    return True


def require_compatible(a: Geometry, b: Geometry, context: str = "") -> None:
    if not geometry_compatible(a, b):
        raise GeometryMismatchError(a, b, context)


def _freeze_values(values, dims: tuple[int, int, int]) -> np.ndarray:
    arr = np.asarray(values)
    count = dims[0] * dims[1] * dims[2]
    if arr.ndim == 1:
        if arr.size != count:
            raise ValidationError(
                f"value count {arr.size} does not match dims {dims} ({count} voxels)"
            )
        arr = arr.reshape(dims, order="F")
    elif arr.shape != dims:
        raise ValidationError(f"value array shape {arr.shape} does not match dims {dims}")
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A scalar field over one lattice. ``values.shape == geometry.dims``."""

    geometry: Geometry
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze_values(self.values, self.geometry.dims))


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Integer-labelled grid; 0 is background, labels 1/2 are GTVp/GTVn.

    Every voxel must be 0 or a declared label.
    """

    grid: VoxelGrid
    labels: tuple[int, ...] = DEFAULT_LABELS

    def __post_init__(self):
        labels = tuple(int(v) for v in self.labels)
        if len(labels) == 0 or len(set(labels)) != len(labels) or 0 in labels:
            raise ValidationError(f"labels must be distinct and nonzero, got {labels}")
        object.__setattr__(self, "labels", labels)
        values = self.grid.values
        if not np.issubdtype(values.dtype, np.integer):
            raise ValidationError(f"mask values must be integers, got dtype {values.dtype}")
        allowed = np.array((0,) + labels, dtype=np.int64)
        bad = ~np.isin(values, allowed)
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValidationError(
                f"voxel {idx} has value {int(values[idx])}, outside labels {list(labels)}"
            )

    @classmethod
    def from_values(cls, values, geometry: Geometry, labels=DEFAULT_LABELS) -> "LabelMask":
        return cls(grid=VoxelGrid(geometry=geometry, values=values), labels=labels)

    @property
    def geometry(self) -> Geometry:
        return self.grid.geometry

    @property
    def values(self) -> np.ndarray:
        return self.grid.values


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """Per-class probability planes over one lattice.

    ``planes`` has shape ``(C, *dims)`` with class 0 the background.
    ``crop_offset`` records where this (possibly cropped) map sits inside
    a larger reference lattice. ``normalized`` asserts per-voxel class
    sums of 1 within 1e-3.
    """

    geometry: Geometry
    planes: np.ndarray
    crop_offset: tuple[int, int, int] = (0, 0, 0)
    normalized: bool = False

    def __post_init__(self):
        planes = np.asarray(self.planes, dtype=np.float64)
        dims = self.geometry.dims
        if planes.ndim != 4 or planes.shape[1:] != dims:
            raise ValidationError(
                f"planes must have shape (C, {dims[0]}, {dims[1]}, {dims[2]}), got {planes.shape}"
            )
        if planes.shape[0] < 2:
            raise ValidationError(f"need at least 2 classes, got {planes.shape[0]}")
        if planes.size and (planes.min() < 0.0 or planes.max() > 1.0):
            raise ValidationError("probabilities must lie in [0, 1]")
        offset = _as_triple(self.crop_offset, int, "crop_offset")
        if any(v < 0 for v in offset):
            raise ValidationError(f"crop_offset must be non-negative, got {offset}")
        if self.normalized:
            sums = planes.sum(axis=0)
            if sums.size and (abs(float(sums.min()) - 1.0) > 1e-3 or abs(float(sums.max()) - 1.0) > 1e-3):
                raise ValidationError("map flagged normalized but class sums deviate from 1 by > 1e-3")
        planes = np.array(planes, copy=True)
        planes.setflags(write=False)
        object.__setattr__(self, "planes", planes)
        object.__setattr__(self, "crop_offset", offset)

    @property
    def num_classes(self) -> int:
        return int(self.planes.shape[0])


def label_volume(mask: LabelMask, label: int) -> int:
    """Exact voxel count of ``label`` in the mask."""
    if label not in mask.labels:
        raise UnknownLabelError(label, mask.labels)
    return int(np.count_nonzero(mask.values == label))


def intersect_count(a: LabelMask, b: LabelMask, label: int) -> int:
    """Exact count of voxels equal to ``label`` in both masks; symmetric."""
    require_compatible(a.geometry, b.geometry, "intersect_count")
    if label not in a.labels:
        raise UnknownLabelError(label, a.labels, "first mask")
    if label not in b.labels:
        raise UnknownLabelError(label, b.labels, "second mask")
    return int(np.count_nonzero((a.values == label) & (b.values == label)))


def binarize(mask: LabelMask, label: int) -> LabelMask:
    """One-vs-rest view: 1 where the mask equals ``label``, else 0."""
    if label not in mask.labels:
        raise UnknownLabelError(label, mask.labels)
    values = (mask.values == label).astype(np.uint8)
    return LabelMask(grid=VoxelGrid(geometry=mask.geometry, values=values), labels=(1,))
