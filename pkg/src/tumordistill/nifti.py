"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Only what BRATS-style ingestion needs: the 348-byte header, voxel
dimensions, pixdim spacing, the common scalar datatypes, and the
slope/intercept scaling. Orientation codes are ignored (inputs are
assumed co-registered per subject). Arrays cross this boundary in
(Z, Y, X) index order, i.e. ``voxels[k]`` is one axial slice.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"

_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
}


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI content."""


class _DeterministicGzipWriter:
    """gzip writer with mtime=0 and no embedded filename (byte-deterministic)."""

    def __init__(self, path):
        self._raw = open(path, "wb")
        self._gz = gzip.GzipFile(fileobj=self._raw, mode="wb", mtime=0)

    def write(self, data):
        return self._gz.write(data)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self._gz.close()
        self._raw.close()
        return False


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        if "w" in mode:
            return _DeterministicGzipWriter(path)
        return gzip.open(path, mode)
    return open(path, mode)


def read(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Load a volume: returns (voxels[z, y, x], spacing (sz, sy, sx) in mm)."""
    with _open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")

    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr == HEADER_SIZE:
        bo = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        bo = ">"
    else:
        raise NiftiError("bad sizeof_hdr; not a NIfTI-1 file")

    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"bad magic {magic!r}")
    if magic == b"ni1\x00":
        raise NiftiError("two-file (.hdr/.img) NIfTI is not supported")

    dim = struct.unpack_from(f"{bo}8h", raw, 40)
    ndim = dim[0]
    if not (1 <= ndim <= 7):
        raise NiftiError(f"invalid dim[0]={ndim}")
    shape_xyz = [max(1, d) for d in dim[1 : 1 + ndim]]
    # collapse trailing singleton dims (e.g. 4-D files with one frame)
    while len(shape_xyz) > 3 and shape_xyz[-1] == 1:
        shape_xyz.pop()
    if len(shape_xyz) > 3:
        raise NiftiError(f"only <=3-D volumes supported, got shape {tuple(shape_xyz)}")
    while len(shape_xyz) < 3:
        shape_xyz.append(1)

    datatype = struct.unpack_from(f"{bo}h", raw, 70)[0]
    if datatype not in _DTYPES:
        raise NiftiError(f"unsupported datatype code {datatype}")
    dtype = _DTYPES[datatype].newbyteorder(bo)

    pixdim = struct.unpack_from(f"{bo}8f", raw, 76)
    spacing = (float(pixdim[3]) or 1.0, float(pixdim[2]) or 1.0, float(pixdim[1]) or 1.0)

    vox_offset = int(struct.unpack_from(f"{bo}f", raw, 108)[0])
    if vox_offset < HEADER_SIZE:
        vox_offset = HEADER_SIZE + 4
    scl_slope = struct.unpack_from(f"{bo}f", raw, 112)[0]
    scl_inter = struct.unpack_from(f"{bo}f", raw, 116)[0]

    count = int(np.prod(shape_xyz))
    payload = raw[vox_offset : vox_offset + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise NiftiError(f"truncated payload: expected {count} voxels")
    flat = np.frombuffer(payload, dtype=dtype)
    # NIfTI stores x fastest; (Z, Y, X) C-order is the same byte sequence.
    voxels = flat.reshape(shape_xyz[::-1])
    if bo == ">":
        voxels = voxels.astype(voxels.dtype.newbyteorder("<"))
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        voxels = voxels.astype(np.float32) * slope + scl_inter
    return np.ascontiguousarray(voxels), spacing


def write(path, voxels: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write voxels[z, y, x] with spacing (sz, sy, sx) as a single-file NIfTI-1.

    float inputs are stored as little-endian float32, integer inputs as
    little-endian int16; both round-trip bitwise through :func:`read`.
    """
    voxels = np.asarray(voxels)
    if voxels.ndim != 3:
        raise NiftiError(f"expected a 3-D array, got shape {voxels.shape}")
    if np.issubdtype(voxels.dtype, np.integer):
        data = voxels.astype("<i2")
        datatype, bitpix = 4, 16
    else:
        data = voxels.astype("<f4")
        datatype, bitpix = 16, 32

    nz, ny, nx = voxels.shape
    sz, sy, sx = (float(s) for s in spacing)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, HEADER_SIZE + 4)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<h", hdr, 254, 1)  # sform_code: scanner
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, 0.0)
    hdr[344:348] = MAGIC_SINGLE

    with _open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00\x00\x00\x00")  # no header extensions
        fh.write(data.tobytes(order="C"))
