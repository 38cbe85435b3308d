"""Core 3D volume and label-mask types, raw+header and NIfTI-1 file I/O,
and intensity/geometry preprocessing.

Arrays are indexed ``[z, y, x]`` so that ravelling in C order yields the
x-fastest linear layout used by the on-disk formats. ``dims`` is always
reported as ``(nx, ny, nz)``.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class VolumeIOError(Exception):
    """Base class for volume file format errors."""


class MalformedHeaderError(VolumeIOError):
    """Header is syntactically invalid or internally inconsistent."""


class DataSizeMismatchError(VolumeIOError):
    """Payload size does not match the dims declared in the header."""


class UnsupportedScalarTypeError(VolumeIOError):
    """File declares a scalar type the reader does not handle."""


class UnsupportedNiftiFeatureError(VolumeIOError):
    """NIfTI file uses a feature outside the supported subset."""


@dataclass(frozen=True)
class Volume:
    """Dense 3D scalar grid with spacing metadata.

    data: float64 array shaped (nz, ny, nx), read-only after construction.
    spacing: (sx, sy, sz) mm per voxel.
    intensity_range: (min, max) recorded by normalize_intensity, else None.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_range: tuple[float, float] | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr is self.data:
            arr = arr.copy()
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def flat(self) -> np.ndarray:
        """Values in x-fastest linear order."""
        return self.data.ravel()


# A gradient map is an ordinary volume whose values are gradient magnitudes.
GradientMap = Volume


@dataclass(frozen=True)
class LabelMask:
    """Per-voxel non-negative integer labels, 0 = background."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.labels)
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.array_equal(arr, np.round(arr)):
                raise ValueError("labels must be integer-valued")
        arr = arr.astype(np.int32, copy=True)
        if arr.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {arr.shape}")
        if arr.min(initial=0) < 0:
            raise ValueError("labels must be non-negative")
        arr.flags.writeable = False
        object.__setattr__(self, "labels", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.labels.shape
        return (nx, ny, nz)

    def label_set(self) -> list[int]:
        """Sorted non-background labels present in the mask."""
        vals = np.unique(self.labels)
        return [int(v) for v in vals if v != 0]


def volume_from_flat(dims, flat, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Build a Volume from dims (nx, ny, nz) and x-fastest flat data."""
    nx, ny, nz = dims
    arr = np.asarray(flat, dtype=np.float64)
    if arr.size != nx * ny * nz:
        raise ValueError(f"flat data has {arr.size} values, dims need {nx * ny * nz}")
    return Volume(arr.reshape(nz, ny, nx), spacing)


def normalize_intensity(v: Volume) -> Volume:
    """Min-max rescale to [0, 1]; constant volumes map to all zeros.

    The original (min, max) is recorded in intensity_range.
    """
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi == lo:
        out = np.zeros_like(v.data)
    else:
        out = (v.data - lo) / (hi - lo)
    return Volume(out, v.spacing, intensity_range=(lo, hi))


def crop_pad(v: Volume, target_dims) -> Volume:
    """Center-crop axes that are too large, symmetrically zero-pad axes
    that are too small. Spacing is preserved."""
    tx, ty, tz = target_dims
    if tx <= 0 or ty <= 0 or tz <= 0:
        raise ValueError(f"target dims must be positive, got {target_dims}")
    out = v.data
    for axis, tgt in ((0, tz), (1, ty), (2, tx)):
        n = out.shape[axis]
        if n > tgt:
            start = (n - tgt) // 2
            sl = [slice(None)] * 3
            sl[axis] = slice(start, start + tgt)
            out = out[tuple(sl)]
        elif n < tgt:
            before = (tgt - n) // 2
            pad = [(0, 0)] * 3
            pad[axis] = (before, tgt - n - before)
            out = np.pad(out, pad)
    return Volume(out, v.spacing, v.intensity_range)


# ---------------------------------------------------------------------------
# raw + header format: <name>.vol (little-endian float32 payload, x-fastest)
# with sidecar <name>.volh text header.
# ---------------------------------------------------------------------------

_RAW_DTYPES = {"float32": np.dtype("<f4"), "int16": np.dtype("<i2")}


def atomic_write_bytes(path, payload: bytes):
    """Write bytes to path via a temp file + rename in the same directory."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _vol_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix != ".vol":
        p = p.with_name(p.name + ".vol")
    return p, p.with_suffix(".volh")


def _format_header(dims, spacing, channels=None) -> str:
    lines = [
        "dims=%d,%d,%d" % dims,
        "spacing=%s,%s,%s" % tuple(repr(float(s)) for s in spacing),
        "dtype=float32",
    ]
    if channels is not None:
        lines.append("channels=%d" % channels)
    return "\n".join(lines) + "\n"


def _parse_header(text: str, path) -> dict:
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MalformedHeaderError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in fields:
            raise MalformedHeaderError(f"{path}:{lineno}: duplicate key {key!r}")
        fields[key] = value.strip()
    for req in ("dims", "spacing", "dtype"):
        if req not in fields:
            raise MalformedHeaderError(f"{path}: missing required key {req!r}")
    unknown = set(fields) - {"dims", "spacing", "dtype", "channels"}
    if unknown:
        raise MalformedHeaderError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        dims = tuple(int(x) for x in fields["dims"].split(","))
        spacing = tuple(float(x) for x in fields["spacing"].split(","))
        channels = int(fields.get("channels", "1"))
    except ValueError as e:
        raise MalformedHeaderError(f"{path}: {e}") from None
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise MalformedHeaderError(f"{path}: dims must be three positive ints, got {fields['dims']}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise MalformedHeaderError(f"{path}: spacing must be three positive floats")
    if channels <= 0:
        raise MalformedHeaderError(f"{path}: channels must be positive")
    if fields["dtype"] not in _RAW_DTYPES:
        raise UnsupportedScalarTypeError(f"{path}: unsupported dtype {fields['dtype']!r}")
    return {"dims": dims, "spacing": spacing, "dtype": fields["dtype"], "channels": channels}


def save_volume(v: Volume, path):
    """Write a Volume as <name>.vol + <name>.volh. Payload is float32."""
    vol_path, hdr_path = _vol_paths(path)
    atomic_write_bytes(vol_path, v.data.astype("<f4").tobytes())
    atomic_write_text(hdr_path, _format_header(v.dims, v.spacing))


def _load_raw(path, expect_channels=1):
    vol_path, hdr_path = _vol_paths(path)
    if not hdr_path.exists():
        raise FileNotFoundError(f"missing header file {hdr_path}")
    if not vol_path.exists():
        raise FileNotFoundError(f"missing payload file {vol_path}")
    hdr = _parse_header(hdr_path.read_text(), hdr_path)
    if hdr["channels"] != expect_channels:
        raise MalformedHeaderError(
            f"{hdr_path}: expected channels={expect_channels}, header declares {hdr['channels']}"
        )
    nx, ny, nz = hdr["dims"]
    dtype = _RAW_DTYPES[hdr["dtype"]]
    payload = vol_path.read_bytes()
    expected = expect_channels * nx * ny * nz * dtype.itemsize
    if len(payload) != expected:
        raise DataSizeMismatchError(
            f"{vol_path}: payload is {len(payload)} bytes, header dims need {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    return arr.reshape(expect_channels, nz, ny, nx), hdr["spacing"]


def load_volume(path, format: str | None = None) -> Volume:
    """Load a volume from raw+header (.vol/.volh) or an uncompressed
    single-file NIfTI-1 (.nii)."""
    p = Path(path)
    if format is None:
        if p.suffix == ".nii":
            format = "nifti1"
        elif p.suffix in (".vol", ".volh", ""):
            format = "raw+header"
        else:
            raise ValueError(f"cannot infer format from {p.name!r}; pass format=")
    if format in ("raw", "raw+header"):
        arr, spacing = _load_raw(p, expect_channels=1)
        return Volume(arr[0], spacing)
    if format == "nifti1":
        return _load_nifti1(p)
    raise ValueError(f"unknown format {format!r}")


def save_mask(m: LabelMask, path, spacing=(1.0, 1.0, 1.0)):
    """Masks use the raw+header format with integer-valued float32 payload."""
    save_volume(Volume(m.labels.astype(np.float64), spacing), path)


def load_mask(path) -> LabelMask:
    v = load_volume(path)
    return LabelMask(np.round(v.data).astype(np.int32))


# ---------------------------------------------------------------------------
# NIfTI-1 read-only subset: single uncompressed .nii, datatypes 4 (int16)
# and 16 (float32), axis-aligned affine, no intensity scaling.
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {4: ("i2", 16), 16: ("f4", 32)}


def _load_nifti1(path: Path) -> Volume:
    blob = path.read_bytes()
    if blob[:2] == b"\x1f\x8b":
        raise UnsupportedNiftiFeatureError(f"{path}: compressed NIfTI is not supported")
    if len(blob) < 348:
        raise MalformedHeaderError(f"{path}: file shorter than the 348-byte NIfTI-1 header")
    hdr = blob[:348]
    if struct.unpack("<i", hdr[0:4])[0] == 348:
        e = "<"
    elif struct.unpack(">i", hdr[0:4])[0] == 348:
        e = ">"
    else:
        raise MalformedHeaderError(f"{path}: sizeof_hdr is not 348 in either byte order")
    magic = hdr[344:348]
    if magic == b"ni1\x00":
        raise UnsupportedNiftiFeatureError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")
    if magic != b"n+1\x00":
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")

    dim = struct.unpack(e + "8h", hdr[40:56])
    datatype, bitpix = struct.unpack(e + "2h", hdr[70:74])
    pixdim = struct.unpack(e + "8f", hdr[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(e + "3f", hdr[108:120])
    qform_code, sform_code = struct.unpack(e + "2h", hdr[252:256])
    quatern = struct.unpack(e + "3f", hdr[256:268])
    srow = np.array(struct.unpack(e + "12f", hdr[280:328])).reshape(3, 4)

    ndim = dim[0]
    if ndim < 3:
        raise UnsupportedNiftiFeatureError(f"{path}: only 3D images supported, dim[0]={ndim}")
    if ndim > 7:
        raise MalformedHeaderError(f"{path}: dim[0]={ndim} out of range")
    if any(d > 1 for d in dim[4 : ndim + 1]):
        raise UnsupportedNiftiFeatureError(f"{path}: multi-volume NIfTI is not supported")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if nx < 1 or ny < 1 or nz < 1:
        raise MalformedHeaderError(f"{path}: non-positive image dims {dim[1:4]}")
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedScalarTypeError(f"{path}: datatype {datatype} not in supported set {{4, 16}}")
    code, expect_bits = _NIFTI_DTYPES[datatype]
    if bitpix != expect_bits:
        raise MalformedHeaderError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        raise UnsupportedNiftiFeatureError(
            f"{path}: intensity scaling (scl_slope/scl_inter) is not supported"
        )
    if sform_code > 0:
        diag = np.abs(np.diag(srow[:, :3]))
        off = np.abs(srow[:, :3]) - np.diag(diag)
        if off.max() > 1e-5 * max(diag.max(), 1.0):
            raise UnsupportedNiftiFeatureError(
                f"{path}: sform affine has shear/rotation; only axis-aligned volumes supported"
            )
    if qform_code > 0 and max(abs(q) for q in quatern) > 1e-6:
        raise UnsupportedNiftiFeatureError(
            f"{path}: qform rotation present; only axis-aligned volumes supported"
        )
    spacing = pixdim[1:4]
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise MalformedHeaderError(f"{path}: non-positive pixdim {spacing}")

    offset = int(round(vox_offset))
    if offset < 348:
        raise MalformedHeaderError(f"{path}: vox_offset {vox_offset} below header size")
    nbytes = nx * ny * nz * (bitpix // 8)
    if len(blob) - offset < nbytes:
        raise DataSizeMismatchError(
            f"{path}: payload has {len(blob) - offset} bytes, dims need {nbytes}"
        )
    arr = np.frombuffer(blob, dtype=np.dtype(e + code), count=nx * ny * nz, offset=offset)
    data = arr.astype(np.float64).reshape(nz, ny, nx)
    return Volume(data, spacing)
