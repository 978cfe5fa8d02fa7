"""Minimal NIfTI-1 reader/writer and cartilage mask ingestion."""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .labels import COMPARTMENT_NAMES
from .volume import Volume

__all__ = [
    "NiftiError",
    "MaskError",
    "LabelVolume",
    "read_volume",
    "write_volume",
    "read_mask",
    "quaternion_affine",
    "DATATYPES",
]

log = logging.getLogger(__name__)

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> numpy dtype
DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    512: np.dtype(np.uint16),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_CODES = {v: k for k, v in DATATYPES.items()}
_NAMES = {"uint8": 2, "int16": 4, "uint16": 512, "float32": 16, "float64": 64}

# (name, struct format) in header order; 348 bytes total
_FIELDS = [
    ("sizeof_hdr", "i"),
    ("data_type", "10s"),
    ("db_name", "18s"),
    ("extents", "i"),
    ("session_error", "h"),
    ("regular", "c"),
    ("dim_info", "B"),
    ("dim", "8h"),
    ("intent_p", "3f"),
    ("intent_code", "h"),
    ("datatype", "h"),
    ("bitpix", "h"),
    ("slice_start", "h"),
    ("pixdim", "8f"),
    ("vox_offset", "f"),
    ("scl_slope", "f"),
    ("scl_inter", "f"),
    ("slice_end", "h"),
    ("slice_code", "B"),
    ("xyzt_units", "B"),
    ("cal_max", "f"),
    ("cal_min", "f"),
    ("slice_duration", "f"),
    ("toffset", "f"),
    ("glmax", "i"),
    ("glmin", "i"),
    ("descrip", "80s"),
    ("aux_file", "24s"),
    ("qform_code", "h"),
    ("sform_code", "h"),
    ("quatern", "3f"),
    ("qoffset", "3f"),
    ("srow_x", "4f"),
    ("srow_y", "4f"),
    ("srow_z", "4f"),
    ("intent_name", "16s"),
    ("magic", "4s"),
]
_FORMAT = "".join(f for _, f in _FIELDS)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI file.

    ``field`` names the offending header field when there is one.
    """

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class MaskError(ValueError):
    pass


def _unpack(raw: bytes, endian: str) -> dict:
    values = struct.unpack(endian + _FORMAT, raw[:HEADER_SIZE])
    hdr, pos = {}, 0
    for name, fmt in _FIELDS:
        count = int(fmt[:-1]) if fmt[:-1].isdigit() and fmt[-1] not in "s" else 1
        if count == 1:
            hdr[name] = values[pos]
        else:
            hdr[name] = values[pos:pos + count]
        pos += count
    return hdr


def _pack(hdr: dict) -> bytes:
    values = []
    for name, fmt in _FIELDS:
        v = hdr[name]
        if isinstance(v, (tuple, list)):
            values.extend(v)
        else:
            values.append(v)
    return struct.pack("<" + _FORMAT, *values)


def quaternion_affine(quatern, qoffset, pixdim) -> np.ndarray:
    """Affine from the qform fields (NIfTI-1 method 2)."""
    b, c, d = (float(v) for v in quatern)
    a2 = 1.0 - (b * b + c * c + d * d)
    if a2 < 1e-7:
        # 180 degree rotation, renormalise (b, c, d)
        a = 0.0
        norm = np.sqrt(b * b + c * c + d * d)
        b, c, d = b / norm, c / norm, d / norm
    else:
        a = np.sqrt(a2)
    r = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac], dtype=np.float64)
    zooms[zooms <= 0] = 1.0
    aff = np.eye(4)
    aff[:3, :3] = r * zooms
    aff[:3, 3] = qoffset
    return aff


def _affine_quaternion(affine) -> tuple[tuple, tuple, float]:
    """Best rigid quaternion for ``affine``; returns (bcd, zooms, qfac)."""
    m = np.asarray(affine, dtype=np.float64)[:3, :3]
    zooms = np.linalg.norm(m, axis=0)
    r = m / zooms
    qfac = 1.0
    if np.linalg.det(r) < 0:
        qfac = -1.0
        r[:, 2] = -r[:, 2]
    # nearest orthonormal matrix
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    # Shepperd's method, choosing a >= 0
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        a, b, c, d = 0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        a, b, c, d = (r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        a, b, c, d = (r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        a, b, c, d = (r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s
    if a < 0:
        b, c, d = -b, -c, -d
    return (b, c, d), tuple(zooms), qfac


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(raw: bytes) -> tuple[dict, str]:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"header too short ({len(raw)} bytes)", "sizeof_hdr")
    for endian in ("<", ">"):
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise NiftiError("expected 348", "sizeof_hdr")
    hdr = _unpack(raw, endian)
    if hdr["magic"] not in (b"n+1\x00",):
        raise NiftiError(f"bad magic {hdr['magic']!r}, expected single-file 'n+1'", "magic")
    return hdr, endian


def read_header(path) -> dict:
    """Parsed header fields of a NIfTI-1 file."""
    return _parse_header(_read_bytes(path))[0]


def read_volume(path) -> Volume:
    """Read a 3-D NIfTI-1 image (``.nii`` or gzip-compressed).

    Integer data without intensity scaling keeps its dtype; everything else
    is returned as float64 with ``scl_slope``/``scl_inter`` applied.
    """
    raw = _read_bytes(path)
    hdr, endian = _parse_header(raw)

    dim = hdr["dim"]
    ndim = dim[0]
    if ndim not in (3, 4):
        raise NiftiError(f"unsupported dimensionality {ndim}", "dim")
    if ndim == 4 and dim[4] != 1:
        raise NiftiError(f"4-D image with {dim[4]} volumes is not supported", "dim")
    shape = tuple(int(n) for n in dim[1:4])
    if min(shape) < 1:
        raise NiftiError(f"non-positive dims {shape}", "dim")

    code = hdr["datatype"]
    if code not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {code}", "datatype")
    dtype = DATATYPES[code].newbyteorder(endian)

    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        raise NiftiError(f"vox_offset {hdr['vox_offset']} inside header", "vox_offset")
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise NiftiError(f"file truncated: need {offset + nbytes} bytes, have {len(raw)}", "vox_offset")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    data = data.reshape(shape, order="F").astype(DATATYPES[code])

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if np.isfinite(slope) and slope != 0 and (slope != 1 or inter != 0):
        data = data.astype(np.float64) * slope + inter

    pixdim = hdr["pixdim"]
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[0], affine[1], affine[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
    elif hdr["qform_code"] > 0:
        affine = quaternion_affine(hdr["quatern"], hdr["qoffset"], pixdim)
    else:
        zooms = [p if p > 0 else 1.0 for p in pixdim[1:4]]
        affine = np.diag([*zooms, 1.0])
    return Volume(data, affine)


def write_volume(v: Volume, path, datatype="float32") -> None:
    """Write ``v`` as single-file NIfTI-1; gzip when ``path`` ends in ``.gz``.

    Missing parent directories are created.
    """
    code = _NAMES.get(datatype, datatype)
    if code not in DATATYPES:
        raise NiftiError(f"unsupported datatype {datatype!r}", "datatype")
    dtype = DATATYPES[code]
    data = np.asarray(v.data)
    if np.issubdtype(dtype, np.integer):
        if not np.all(np.isfinite(data)) or not np.array_equal(data, np.round(data)):
            raise NiftiError(f"non-integral data cannot be stored as {dtype.name}", "datatype")
        info = np.iinfo(dtype)
        if data.size and (data.min() < info.min or data.max() > info.max):
            raise NiftiError(f"data range [{data.min()}, {data.max()}] overflows {dtype.name}", "datatype")

    affine = np.asarray(v.affine, dtype=np.float64)
    quatern, zooms, qfac = _affine_quaternion(affine)
    hdr = {
        "sizeof_hdr": HEADER_SIZE,
        "data_type": b"",
        "db_name": b"",
        "extents": 0,
        "session_error": 0,
        "regular": b"r",
        "dim_info": 0,
        "dim": (3, *v.dims, 1, 1, 1, 1),
        "intent_p": (0.0, 0.0, 0.0),
        "intent_code": 0,
        "datatype": code,
        "bitpix": dtype.itemsize * 8,
        "slice_start": 0,
        "pixdim": (qfac, *zooms, 1.0, 1.0, 1.0, 1.0),
        "vox_offset": float(VOX_OFFSET),
        "scl_slope": 1.0,
        "scl_inter": 0.0,
        "slice_end": 0,
        "slice_code": 0,
        "xyzt_units": 2 | 8,  # mm, seconds
        "cal_max": 0.0,
        "cal_min": 0.0,
        "slice_duration": 0.0,
        "toffset": 0.0,
        "glmax": 0,
        "glmin": 0,
        "descrip": b"kneet1rho",
        "aux_file": b"",
        "qform_code": 1,
        "sform_code": 1,
        "quatern": quatern,
        "qoffset": tuple(affine[:3, 3]),
        "srow_x": tuple(affine[0]),
        "srow_y": tuple(affine[1]),
        "srow_z": tuple(affine[2]),
        "intent_name": b"",
        "magic": b"n+1\x00",
    }
    payload = _pack(hdr) + b"\x00" * 4 + data.astype(dtype.newbyteorder("<")).tobytes(order="F")
    path = os.fspath(path)
    if path.endswith(".gz"):
        # mtime=0 keeps compressed output byte-stable
        payload = gzip.compress(payload, mtime=0)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(payload)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer cartilage mask coded 0 background, 1 FC, 2 MTC, 3 LTC, 4 PC."""

    volume: Volume

    def __post_init__(self):
        v = self.volume
        if not v.is_integer:
            raise MaskError("mask must be integer-typed")
        values = np.unique(v.data)
        bad = [int(x) for x in values if int(x) not in COMPARTMENT_NAMES and x != 0]
        if bad:
            raise MaskError("unknown label " + ", ".join(str(b) for b in bad))

    @property
    def data(self) -> np.ndarray:
        return self.volume.data

    @property
    def affine(self) -> np.ndarray:
        return self.volume.affine

    def counts(self) -> dict:
        """Voxel count per compartment name."""
        return {name: int(np.count_nonzero(self.volume.data == code))
                for code, name in COMPARTMENT_NAMES.items()}

    def compartment(self, name_or_code) -> np.ndarray:
        code = name_or_code
        if isinstance(name_or_code, str):
            code = {n: c for c, n in COMPARTMENT_NAMES.items()}[name_or_code]
        return self.volume.data == code


def read_mask(path) -> LabelVolume:
    """Read and validate a cartilage mask."""
    hdr = read_header(path)
    if hdr["datatype"] in (16, 64):
        raise MaskError("mask must be integer-typed")
    v = read_volume(path)
    if not v.is_integer:
        # scaled integer storage
        raise MaskError("mask must be integer-typed (intensity scaling is not allowed)")
    mask = LabelVolume(v)
    counts = mask.counts()
    for name in ("FC", "MTC", "LTC"):
        if counts[name] == 0:
            log.warning("mask %s has no %s voxels", path, name)
    return mask
