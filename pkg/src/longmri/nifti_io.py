"""Single-file NIfTI-1 reading and writing.

Only the subset of the format needed by the pipeline is handled: ``.nii``
files (optionally gzip-compressed) with magic ``n+1``, 3-D data (trailing
singleton dimensions are dropped) and datatypes uint8, int16, float32 and
float64. Voxels are always returned as float32.
"""
from __future__ import annotations

import gzip
import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, NiftiFormatError, UnsupportedDatatypeError
from .volume import Volume3D, voxel_volume_mm3

__all__ = ["NiftiHeader", "read_nifti", "write_nifti", "voxel_volume_mm3", "parse_header"]

log = logging.getLogger(__name__)

HEADER_SIZE = 348
VOX_OFFSET = 352
GZIP_MAGIC = b"\x1f\x8b"

# NIfTI datatype code -> numpy dtype (byte order applied later)
DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}


@dataclass(frozen=True)
class NiftiHeader:
    datatype: int
    dims: tuple[int, ...]
    pixdim: tuple[float, float, float]
    scl_slope: float
    scl_inter: float
    magic: bytes
    vox_offset: int
    byteorder: str
    affine: np.ndarray
    descrip: str = ""

    @property
    def scaling(self) -> tuple[float, float]:
        # slope 0 (or non-finite) means "no scaling"
        if self.scl_slope == 0 or not np.isfinite(self.scl_slope):
            return 1.0, 0.0
        inter = self.scl_inter if np.isfinite(self.scl_inter) else 0.0
        return float(self.scl_slope), float(inter)


def _quaternion_affine(b, c, d, qfac, pixdim, offset):
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 1e-7 else 0.0
    R = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    scale = np.array(pixdim, dtype=np.float64)
    scale[2] *= -1.0 if qfac < 0 else 1.0
    A = np.eye(4)
    A[:3, :3] = R * scale
    A[:3, 3] = offset
    return A


def parse_header(raw: bytes) -> NiftiHeader:
    """Decode the 348-byte header, detecting byte order from ``sizeof_hdr``."""
    if len(raw) < HEADER_SIZE:
        raise CorruptFileError(f"header truncated: {len(raw)} bytes")
    for bo in ("<", ">"):
        if struct.unpack(bo + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise NiftiFormatError("sizeof_hdr is not 348; not a NIfTI-1 file")

    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise NiftiFormatError(f"bad magic {magic!r}: only single-file NIfTI-1 ('n+1') is supported")

    dim = struct.unpack(bo + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(bo + "2h", raw[70:74])
    pixdim = struct.unpack(bo + "8f", raw[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(bo + "3f", raw[108:120])
    descrip = raw[148:228].split(b"\x00", 1)[0].decode("latin-1")
    qform_code, sform_code = struct.unpack(bo + "2h", raw[252:256])
    quat = struct.unpack(bo + "6f", raw[256:280])
    srow = np.array(struct.unpack(bo + "12f", raw[280:328]), dtype=np.float64).reshape(3, 4)

    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"invalid dim[0] = {ndim}")
    dims = tuple(int(d) for d in dim[1:ndim + 1])
    if any(d < 1 for d in dims):
        raise NiftiFormatError(f"non-positive dimension in {dims}")
    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"unsupported NIfTI datatype code {datatype}")

    spacing = tuple(abs(float(p)) for p in (list(pixdim[1:4]) + [1.0, 1.0, 1.0])[:3])
    spacing = tuple(s if s > 0 and np.isfinite(s) else 1.0 for s in spacing)

    if sform_code > 0:
        affine = np.eye(4)
        affine[:3] = srow
    elif qform_code > 0:
        affine = _quaternion_affine(*quat[:3], pixdim[0], spacing, quat[3:6])
    else:
        affine = np.diag(list(spacing) + [1.0])

    return NiftiHeader(
        datatype=int(datatype),
        dims=dims,
        pixdim=spacing,
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
        magic=magic,
        vox_offset=int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET,
        byteorder=bo,
        affine=affine,
        descrip=descrip,
    )


def _direction(affine: np.ndarray, spacing) -> np.ndarray:
    cols = affine[:3, :3] / np.asarray(spacing)[None, :]
    if np.allclose(np.linalg.norm(cols, axis=1), 1.0, atol=1e-6):
        return cols
    # sheared or otherwise non-orthonormal; orientation is informational only
    return np.eye(3)


def _coerce_3d(dims: tuple[int, ...]) -> tuple[int, int, int]:
    dims = tuple(dims) + (1,) * max(0, 3 - len(dims))
    if any(d != 1 for d in dims[3:]):
        raise NiftiFormatError(f"only 3-D volumes are supported, got dims {dims}")
    return dims[:3]


def read_nifti(path) -> Volume3D:
    """Read a ``.nii`` / ``.nii.gz`` file into a float32 :class:`Volume3D`."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:2] == GZIP_MAGIC:
        try:
            blob = gzip.decompress(blob)
        except (EOFError, OSError) as exc:
            raise CorruptFileError(f"{path}: damaged gzip stream ({exc})") from exc

    hdr = parse_header(blob[:HEADER_SIZE])
    shape = _coerce_3d(hdr.dims)
    dtype = DATATYPES[hdr.datatype].newbyteorder(hdr.byteorder)
    nbytes = int(np.prod(shape)) * dtype.itemsize
    payload = blob[hdr.vox_offset:hdr.vox_offset + nbytes]
    if len(payload) < nbytes:
        raise CorruptFileError(f"{path}: payload truncated ({len(payload)} of {nbytes} bytes)")

    raw = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    slope, inter = hdr.scaling
    if slope == 1.0 and inter == 0.0:
        data = raw.astype(np.float32)
    else:
        data = (raw.astype(np.float64) * slope + inter).astype(np.float32)

    bad = ~np.isfinite(data)
    if bad.any():
        n_bad = int(bad.sum())
        warnings.warn(f"{path}: replaced {n_bad} non-finite voxels with 0", RuntimeWarning, stacklevel=2)
        data = np.where(bad, np.float32(0), data)

    return Volume3D(
        data=np.ascontiguousarray(data),
        spacing=hdr.pixdim,
        origin=tuple(hdr.affine[:3, 3]),
        orientation=_direction(hdr.affine, hdr.pixdim),
        intensity_units=hdr.descrip,
    )


def _build_header(vol: Volume3D) -> bytes:
    buf = bytearray(VOX_OFFSET)
    struct.pack_into("<i", buf, 0, HEADER_SIZE)
    buf[38] = ord("r")
    nx, ny, nz = vol.shape
    struct.pack_into("<8h", buf, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", buf, 70, 16, 32)
    struct.pack_into("<8f", buf, 76, 1.0, *vol.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", buf, 108, float(VOX_OFFSET), 1.0, 0.0)
    buf[123] = 2  # xyzt_units: mm
    buf[148:148 + 79] = vol.intensity_units.encode("latin-1", "replace")[:79].ljust(79, b"\x00")
    struct.pack_into("<2h", buf, 252, 0, 1)  # sform_code = scanner
    affine = vol.orientation * np.asarray(vol.spacing)[None, :]
    srow = np.hstack([affine, np.asarray(vol.origin)[:, None]])
    struct.pack_into("<12f", buf, 280, *srow.ravel())
    buf[344:348] = b"n+1\x00"
    return bytes(buf)


def write_nifti(vol: Volume3D, path) -> None:
    """Write ``vol`` as float32 single-file NIfTI-1; gzip when the name ends in ``.gz``."""
    path = Path(path)
    payload = np.asarray(vol.data, dtype="<f4").tobytes(order="F")
    blob = _build_header(vol) + payload
    if path.suffix == ".gz":
        # mtime=0 keeps compressed output byte-reproducible
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)
