"""NIfTI-1 single-file reader/writer (.nii and .nii.gz).

Scope: the "n+1" single-file form only, 3-D volumes plus 4-D probability
maps with the class axis in dim[4]. Little- and big-endian files are
read; files are always written little-endian with sform_code 1. Voxel
payloads follow the standard on-disk layout, first axis fastest, which
matches the in-memory convention of :mod:`rtseg.core`.

Crop placement of probability maps is persisted in a JSON sidecar
``<name>.offset.json`` (keys ``x``, ``y``, ``z``) next to the image,
because the NIfTI-1 core fields cannot carry it and a sidecar keeps the
image readable by standard viewers.
"""

from __future__ import annotations

import gzip
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Geometry, LabelMask, ProbabilityMap, VoxelGrid
from .errors import (
    DataLengthError,
    NiftiFormatError,
    NiftiWriteError,
    NonIntegralMaskError,
    UnknownLabelError,
    UnsupportedDatatypeError,
)

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extension flag

# Field layout of the 348-byte NIfTI-1 header (little-endian base form).
_HEADER_FIELDS = [
    ("sizeof_hdr", "<i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "<i4"),
    ("session_error", "<i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "<i2", (8,)),
    ("intent_p1", "<f4"),
    ("intent_p2", "<f4"),
    ("intent_p3", "<f4"),
    ("intent_code", "<i2"),
    ("datatype", "<i2"),
    ("bitpix", "<i2"),
    ("slice_start", "<i2"),
    ("pixdim", "<f4", (8,)),
    ("vox_offset", "<f4"),
    ("scl_slope", "<f4"),
    ("scl_inter", "<f4"),
    ("slice_end", "<i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "<f4"),
    ("cal_min", "<f4"),
    ("slice_duration", "<f4"),
    ("toffset", "<f4"),
    ("glmax", "<i4"),
    ("glmin", "<i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "<i2"),
    ("sform_code", "<i2"),
    ("quatern_b", "<f4"),
    ("quatern_c", "<f4"),
    ("quatern_d", "<f4"),
    ("qoffset_x", "<f4"),
    ("qoffset_y", "<f4"),
    ("qoffset_z", "<f4"),
    ("srow_x", "<f4", (4,)),
    ("srow_y", "<f4", (4,)),
    ("srow_z", "<f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]

HEADER_DTYPE_LE = np.dtype(_HEADER_FIELDS)
HEADER_DTYPE_BE = HEADER_DTYPE_LE.newbyteorder(">")

# datatype code -> numpy dtype (supported subset of the standard codes)
DTYPE_BY_CODE = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
CODE_BY_DTYPE = {dt: code for code, dt in DTYPE_BY_CODE.items()}


@dataclass(frozen=True)
class NiftiHeaderSummary:
    """Decoded header fields needed by the toolkit (no voxel payload)."""

    datatype: int
    ndim: int
    dims: tuple[int, ...]
    pixdim: tuple[float, ...]
    sform_code: int
    qform_code: int
    affine: tuple | None  # 4x4 nested tuple, sform preferred over qform
    scl_slope: float
    scl_inter: float
    byte_order: str  # "<" little, ">" big
    vox_offset: int

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return tuple(self.dims[:3])

    def geometry(self) -> Geometry:
        if self.affine is not None:
            return Geometry.from_affine(np.array(self.affine), self.spatial_dims)
        # pixdim-only fallback: axis-aligned grid at the world origin
        spacing = tuple(p if p > 0 else 1.0 for p in self.pixdim[:3])
        return Geometry(dims=self.spatial_dims, spacing=spacing)


def sidecar_path(path: str | Path) -> Path:
    """``x.nii`` / ``x.nii.gz`` -> ``x.offset.json``."""
    p = Path(path)
    name = p.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return p.with_name(name + ".offset.json")


def _open_for_read(path: Path):
    raw = open(path, "rb")
    magic = raw.read(2)
    raw.seek(0)
    if magic == b"\x1f\x8b":
        return gzip.GzipFile(fileobj=raw, mode="rb")
    return raw


def _quaternion_to_direction(b: float, c: float, d: float, qfac: float) -> np.ndarray:
    w2 = 1.0 - (b * b + c * c + d * d)
    # source fields are float32; tolerate small negative round-off
    if w2 < -3e-7:
        raise NiftiFormatError(f"invalid quaternion (w^2 = {w2:.3g})")
    a = math.sqrt(max(w2, 0.0))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    rot[:, 2] *= qfac
    return rot


def _decode_header(buf: bytes, path: Path) -> tuple[NiftiHeaderSummary, np.void]:
    if len(buf) < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: truncated header ({len(buf)} bytes, need {HEADER_SIZE})")
    size_le = int(np.frombuffer(buf, dtype="<i4", count=1)[0])
    size_be = int(np.frombuffer(buf, dtype=">i4", count=1)[0])
    if size_le == HEADER_SIZE:
        order, dtype = "<", HEADER_DTYPE_LE
    elif size_be == HEADER_SIZE:
        order, dtype = ">", HEADER_DTYPE_BE
    else:
        raise NiftiFormatError(f"{path}: sizeof_hdr is {size_le}, not a NIfTI-1 file")
    hdr = np.frombuffer(buf[:HEADER_SIZE], dtype=dtype)[0]

    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic == b"ni1":
        raise NiftiFormatError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")
    if magic != b"n+1":
        raise NiftiFormatError(f"{path}: bad magic {magic!r}")

    ndim = int(hdr["dim"][0])
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"{path}: dim[0] = {ndim} out of range")
    dims = tuple(int(v) for v in hdr["dim"][1 : ndim + 1])
    if any(v < 1 for v in dims):
        raise NiftiFormatError(f"{path}: non-positive dimension in {dims}")
    pixdim = tuple(float(v) for v in hdr["pixdim"][1 : ndim + 1])

    affine = None
    if int(hdr["sform_code"]) > 0:
        affine = np.eye(4)
        affine[0, :] = hdr["srow_x"]
        affine[1, :] = hdr["srow_y"]
        affine[2, :] = hdr["srow_z"]
    elif int(hdr["qform_code"]) > 0:
        qfac = float(hdr["pixdim"][0])
        if qfac == 0.0:
            qfac = 1.0
        rot = _quaternion_to_direction(
            float(hdr["quatern_b"]), float(hdr["quatern_c"]), float(hdr["quatern_d"]), qfac
        )
        spacing = [float(v) if float(v) > 0 else 1.0 for v in hdr["pixdim"][1:4]]
        affine = np.eye(4)
        affine[:3, :3] = rot @ np.diag(spacing)
        affine[:3, 3] = [float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"])]

    summary = NiftiHeaderSummary(
        datatype=int(hdr["datatype"]),
        ndim=ndim,
        dims=dims,
        pixdim=pixdim,
        sform_code=int(hdr["sform_code"]),
        qform_code=int(hdr["qform_code"]),
        affine=None if affine is None else tuple(tuple(float(v) for v in row) for row in affine),
        scl_slope=float(hdr["scl_slope"]),
        scl_inter=float(hdr["scl_inter"]),
        byte_order=order,
        vox_offset=int(hdr["vox_offset"]),
    )
    return summary, hdr


def read_header_summary(path: str | Path) -> NiftiHeaderSummary:
    """Decode the header only; the voxel payload is not touched."""
    p = Path(path)
    with _open_for_read(p) as f:
        buf = f.read(HEADER_SIZE)
    summary, _ = _decode_header(buf, p)
    return summary


def read_geometry(path: str | Path) -> Geometry:
    return read_header_summary(path).geometry()


def _read_payload(path: Path, summary: NiftiHeaderSummary, shape: tuple[int, ...]) -> np.ndarray:
    if summary.datatype not in DTYPE_BY_CODE:
        raise UnsupportedDatatypeError(f"{path}: datatype code {summary.datatype} is not supported")
    dtype = DTYPE_BY_CODE[summary.datatype].newbyteorder(summary.byte_order)
    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    with _open_for_read(path) as f:
        f.seek(summary.vox_offset)
        buf = f.read(nbytes)
    if len(buf) < nbytes:
        raise DataLengthError(
            f"{path}: payload holds {len(buf)} bytes but dims {shape} require {nbytes}"
        )
    arr = np.frombuffer(buf, dtype=dtype, count=count).reshape(shape, order="F")
    if summary.byte_order == ">":
        arr = arr.astype(dtype.newbyteorder("<"))
    return arr


def _apply_scaling(arr: np.ndarray, summary: NiftiHeaderSummary) -> np.ndarray:
    slope, inter = summary.scl_slope, summary.scl_inter
    if slope == 0.0 or math.isnan(slope) or (slope == 1.0 and inter == 0.0):
        return arr
    return arr.astype(np.float64) * slope + inter


def read_volume(path: str | Path) -> VoxelGrid:
    """Read a 3-D volume; values are slope/intercept-scaled when set.

    Geometry comes from the sform when sform_code > 0, else the qform,
    else a pixdim-only axis-aligned fallback.
    """
    p = Path(path)
    summary = read_header_summary(p)
    dims = summary.dims
    if summary.ndim == 4 and dims[3] == 1:
        dims = dims[:3]  # tolerate a degenerate 4th axis
    elif summary.ndim != 3:
        raise NiftiFormatError(
            f"{p}: expected a 3-D volume, got dim[0] = {summary.ndim} with dims {summary.dims}"
        )
    arr = _read_payload(p, summary, dims[:3])
    arr = _apply_scaling(arr, summary)
    return VoxelGrid(geometry=summary.geometry(), values=arr)


def read_mask(path: str | Path, allowed_labels=(1, 2)) -> LabelMask:
    """Read an integer label mask, validating against ``allowed_labels``.

    Float-stored masks are accepted when every voxel is integral within
    1e-6. Any nonzero value outside the allowed set is reported with its
    voxel index.
    """
    p = Path(path)
    allowed = tuple(int(v) for v in allowed_labels)
    grid = read_volume(p)
    values = grid.values
    if np.issubdtype(values.dtype, np.floating):
        rounded = np.rint(values)
        err = np.abs(values - rounded)
        if err.size and float(err.max()) > 1e-6:
            idx = tuple(int(i) for i in np.argwhere(err > 1e-6)[0])
            raise NonIntegralMaskError(float(values[idx]), idx, p)
        values = rounded.astype(np.int64)
    else:
        values = values.astype(np.int64)
    ok = np.isin(values, np.array((0,) + allowed, dtype=np.int64))
    if not ok.all():
        idx = tuple(int(i) for i in np.argwhere(~ok)[0])
        raise UnknownLabelError(int(values[idx]), allowed, f"{p} at voxel {idx}")
    if 0 <= min(allowed) and max(allowed) <= 255:
        values = values.astype(np.uint8)
    return LabelMask(grid=VoxelGrid(geometry=grid.geometry, values=values), labels=allowed)


def read_probability_map(path: str | Path) -> ProbabilityMap:
    """Read a 4-D probability map (classes in dim[4]) plus its offset sidecar."""
    p = Path(path)
    summary = read_header_summary(p)
    if summary.ndim != 4 or summary.dims[3] < 2:
        raise NiftiFormatError(
            f"{p}: expected a 4-D probability map with >= 2 classes, got dims {summary.dims}"
        )
    arr = _read_payload(p, summary, summary.dims)
    arr = _apply_scaling(arr, summary)
    planes = np.moveaxis(arr, -1, 0)

    offset = (0, 0, 0)
    sc = sidecar_path(p)
    if sc.exists():
        data = json.loads(sc.read_text())
        offset = (int(data["x"]), int(data["y"]), int(data["z"]))

    sums = planes.astype(np.float64).sum(axis=0)
    normalized = bool(sums.size) and bool(np.all(np.abs(sums - 1.0) <= 1e-3))
    return ProbabilityMap(
        geometry=summary.geometry(),
        planes=planes,
        crop_offset=offset,
        normalized=normalized,
    )


def _new_header() -> np.ndarray:
    hdr = np.zeros((), dtype=HEADER_DTYPE_LE)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["vox_offset"] = float(VOX_OFFSET)
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = b"rtseg"
    hdr["magic"] = b"n+1"
    return hdr


def _fill_geometry(hdr: np.ndarray, geometry: Geometry) -> None:
    aff = geometry.affine
    hdr["pixdim"][0] = 1.0
    hdr["pixdim"][1:4] = geometry.spacing
    hdr["sform_code"] = 1
    hdr["qform_code"] = 0
    hdr["srow_x"] = aff[0, :]
    hdr["srow_y"] = aff[1, :]
    hdr["srow_z"] = aff[2, :]


_WRITE_CASTS = {
    np.dtype(np.bool_): np.dtype(np.uint8),
    np.dtype(np.int8): np.dtype(np.int16),
    np.dtype(np.uint16): np.dtype(np.int32),
    np.dtype(np.float16): np.dtype(np.float32),
}


def _writable_array(values: np.ndarray) -> np.ndarray:
    dtype = values.dtype
    if dtype in CODE_BY_DTYPE:
        return values
    if dtype in _WRITE_CASTS:
        return values.astype(_WRITE_CASTS[dtype])
    if dtype in (np.dtype(np.int64), np.dtype(np.uint32), np.dtype(np.uint64)):
        if values.size and (values.min() < np.iinfo(np.int32).min or values.max() > np.iinfo(np.int32).max):
            raise UnsupportedDatatypeError(f"values of dtype {dtype} exceed int32 range")
        return values.astype(np.int32)
    raise UnsupportedDatatypeError(f"cannot store dtype {dtype} in a NIfTI-1 file")


def _write_bytes(path: Path, header: np.ndarray, payload: bytes) -> None:
    blob = header.tobytes() + b"\x00\x00\x00\x00" + payload
    try:
        if path.name.endswith(".gz"):
            with open(path, "wb") as raw:
                # fixed mtime and empty name keep output byte-stable
                with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as f:
                    f.write(blob)
        else:
            with open(path, "wb") as f:
                f.write(blob)
    except OSError as exc:
        raise NiftiWriteError(f"cannot write {path}: {exc}") from exc


def write_volume(obj: VoxelGrid | LabelMask | ProbabilityMap, path: str | Path) -> None:
    """Write a grid, mask, or probability map as single-file NIfTI-1.

    Masks are stored uint8; probability maps float32 with the class axis
    in dim[4] plus an offset sidecar; gzip is applied when the path ends
    ``.gz``. The sform carries the geometry (sform_code 1).
    """
    p = Path(path)
    hdr = _new_header()

    if isinstance(obj, ProbabilityMap):
        _fill_geometry(hdr, obj.geometry)
        planes = np.moveaxis(obj.planes, 0, -1).astype(np.float32)
        hdr["dim"][0] = 4
        hdr["dim"][1:5] = planes.shape
        hdr["dim"][5:] = 1
        hdr["pixdim"][4] = 1.0
        hdr["datatype"] = CODE_BY_DTYPE[np.dtype(np.float32)]
        hdr["bitpix"] = 32
        _write_bytes(p, hdr, planes.tobytes(order="F"))
        off = obj.crop_offset
        sidecar = {"x": off[0], "y": off[1], "z": off[2]}
        try:
            sidecar_path(p).write_text(json.dumps(sidecar, sort_keys=True) + "\n")
        except OSError as exc:
            raise NiftiWriteError(f"cannot write sidecar for {p}: {exc}") from exc
        return

    if isinstance(obj, LabelMask):
        values = obj.values.astype(np.uint8)
        geometry = obj.geometry
    elif isinstance(obj, VoxelGrid):
        values = _writable_array(obj.values)
        geometry = obj.geometry
    else:
        raise TypeError(f"cannot write object of type {type(obj).__name__}")

    _fill_geometry(hdr, geometry)
    hdr["dim"][0] = 3
    hdr["dim"][1:4] = geometry.dims
    hdr["dim"][4:] = 1
    hdr["datatype"] = CODE_BY_DTYPE[values.dtype]
    hdr["bitpix"] = values.dtype.itemsize * 8
    _write_bytes(p, hdr, values.tobytes(order="F"))
