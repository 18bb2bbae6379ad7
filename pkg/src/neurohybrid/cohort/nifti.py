"""Minimal single-file NIfTI-1 (``.nii``) reader/writer.

Only little-endian, 3D, ``uint8`` and ``float32`` volumes are supported.
Voxel data are stored x-fastest (Fortran order) as the format requires.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
DT_UINT8 = 2
DT_FLOAT32 = 16
_DTYPE_CODES = {np.dtype(np.uint8): (DT_UINT8, 8), np.dtype(np.float32): (DT_FLOAT32, 32)}
_CODE_DTYPES = {DT_UINT8: np.dtype("<u1"), DT_FLOAT32: np.dtype("<f4")}


class NiftiFormatError(ValueError):
    """Malformed or unsupported NIfTI file."""


def _header(shape, dtype, spacing) -> bytes:
    code, bitpix = _DTYPE_CODES[dtype]
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<b", hdr, 39, 0)  # dim_info
    struct.pack_into("<8h", hdr, 40, 3, *shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<fff", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<hh", hdr, 252, 0, 1)  # qform_code, sform_code
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], 0.0)
    hdr[344:348] = b"n+1\0"
    return bytes(hdr)


def write_nifti(volume: np.ndarray, path, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a 3D ``uint8``/``bool`` or ``float32`` volume."""
    vol = np.asarray(volume)
    if vol.dtype == bool:
        vol = vol.astype(np.uint8)
    if vol.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {vol.shape}")
    if vol.dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {vol.dtype}; use uint8 or float32")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ValueError("spacing needs three values")
    payload = vol.astype(vol.dtype.newbyteorder("<"), copy=False).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(_header(vol.shape, vol.dtype, spacing))
        fh.write(b"\0\0\0\0")  # no extensions
        fh.write(payload)


def read_nifti(path, with_spacing: bool = False):
    """Read a volume written by :func:`write_nifti` (or any compatible file).

    Returns the array, or ``(array, spacing)`` when ``with_spacing``.
    """
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: header truncated ({len(raw)} bytes)")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiFormatError(f"{path}: sizeof_hdr is {sizeof_hdr}, expected 348 little-endian")
    magic = raw[344:348]
    if magic == b"ni1\0":
        raise NiftiFormatError(f"{path}: magic 'ni1' (detached header/image pair) is an unsupported variant")
    if magic != b"n+1\0":
        raise NiftiFormatError(f"{path}: bad magic {magic!r}")
    dims = struct.unpack_from("<8h", raw, 40)
    if dims[0] != 3 and not (dims[0] > 3 and all(d == 1 for d in dims[4 : dims[0] + 1])):
        raise NiftiFormatError(f"{path}: dim[0]={dims[0]}; only 3D volumes are supported")
    shape = tuple(int(d) for d in dims[1:4])
    if min(shape) < 1:
        raise NiftiFormatError(f"{path}: invalid dim {shape}")
    code, _bitpix = struct.unpack_from("<hh", raw, 70)
    if code not in _CODE_DTYPES:
        raise NiftiFormatError(f"{path}: datatype {code} unsupported (uint8=2, float32=16 only)")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    offset = int(vox_offset)
    if offset < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: vox_offset {vox_offset} inside header")
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise NiftiFormatError(f"{path}: payload truncated ({len(raw) - offset} of {nbytes} bytes)")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    vol = data.reshape(shape, order="F").astype(dtype.newbyteorder("="))
    vol = np.ascontiguousarray(vol)
    if with_spacing:
        return vol, tuple(float(p) for p in pixdim[1:4])
    return vol
