"""Minimal NIfTI-1 reader/writer.

Supports the subset this package needs: single-file .nii / .nii.gz, 3D scalar
volumes (trailing singleton dimensions are squeezed), the common datatypes,
scl_slope/scl_inter rescaling, and both byte orders. On read, the volume is
reoriented to the closest-to-canonical axis order (x, y, z) derived from the
sform (preferred) or qform affine, so that callers always see the same
in-memory convention. Written files carry a diagonal sform affine built from
the voxel spacing.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import VolumeLoadError

HEADER_SIZE = 348

# NIfTI-1 datatype code -> numpy dtype
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
    1280: np.uint64,
}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _read_bytes(path):
    path = Path(path)
    if not path.exists():
        raise VolumeLoadError(f"file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(raw, path):
    if len(raw) < HEADER_SIZE:
        raise VolumeLoadError(f"{path}: file shorter than NIfTI-1 header")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr == 348:
        bo = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == 348:
        bo = ">"
    else:
        raise VolumeLoadError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")

    magic = raw[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise VolumeLoadError(f"{path}: bad NIfTI magic {magic!r}")
    if magic[:3] == b"ni1":
        raise VolumeLoadError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")

    dim = struct.unpack_from(bo + "8h", raw, 40)
    datatype = struct.unpack_from(bo + "h", raw, 70)[0]
    pixdim = struct.unpack_from(bo + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(bo + "f", raw, 108)[0])
    scl_slope = struct.unpack_from(bo + "f", raw, 112)[0]
    scl_inter = struct.unpack_from(bo + "f", raw, 116)[0]
    qform_code = struct.unpack_from(bo + "h", raw, 252)[0]
    sform_code = struct.unpack_from(bo + "h", raw, 254)[0]
    quatern = struct.unpack_from(bo + "3f", raw, 256)
    qoffset = struct.unpack_from(bo + "3f", raw, 268)
    srow = np.array(struct.unpack_from(bo + "12f", raw, 280), dtype=np.float64).reshape(3, 4)

    return {
        "byteorder": bo,
        "dim": dim,
        "datatype": datatype,
        "pixdim": pixdim,
        "vox_offset": vox_offset,
        "scl_slope": scl_slope,
        "scl_inter": scl_inter,
        "qform_code": qform_code,
        "sform_code": sform_code,
        "quatern": quatern,
        "qoffset": qoffset,
        "srow": srow,
    }


def _quaternion_rotation(b, c, d):
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )


def _affine_from_header(hdr):
    pixdim = hdr["pixdim"]
    if hdr["sform_code"] > 0:
        return hdr["srow"][:, :3].copy()
    if hdr["qform_code"] > 0:
        rot = _quaternion_rotation(*hdr["quatern"])
        qfac = -1.0 if pixdim[0] == -1.0 else 1.0
        scale = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
        return rot * scale[np.newaxis, :]
    return np.diag([pixdim[1], pixdim[2], pixdim[3]])


def _canonical_orientation(mat):
    """Map each data axis to its dominant world axis and sign.

    Returns (perm, flips): data axis j maps to world axis perm[j], negated when
    flips[j]. Greedy assignment on |mat| keeps the mapping a permutation even
    for oblique affines.
    """
    raw = np.asarray(mat, dtype=np.float64)
    absmat = np.abs(raw)
    perm = [-1, -1, -1]
    used = set()
    # strongest components first so the greedy choice is well-defined
    order = np.argsort(-absmat.max(axis=0))
    for j in order:
        candidates = np.argsort(-absmat[:, j])
        for i in candidates:
            if i not in used:
                perm[j] = int(i)
                used.add(int(i))
                break
    flips = [raw[perm[j], j] < 0 for j in range(3)]
    return perm, flips


def read_nifti(path):
    """Read a 3D NIfTI-1 volume.

    Returns (data, spacing): data as a numpy array indexed (x, y, z) in
    closest-to-canonical orientation, spacing as a 3-tuple of voxel sizes in mm.
    """
    raw = _read_bytes(path)
    hdr = _parse_header(raw, path)

    ndim = hdr["dim"][0]
    if not 1 <= ndim <= 7:
        raise VolumeLoadError(f"{path}: invalid dim[0]={ndim}")
    shape = [max(1, hdr["dim"][k]) for k in range(1, ndim + 1)]
    if int(np.prod(shape[3:], dtype=np.int64)) != 1:
        raise VolumeLoadError(f"{path}: expected a 3D volume, got shape {tuple(shape)}")
    shape3 = (shape + [1, 1, 1])[:3]

    if hdr["datatype"] not in _DTYPES:
        raise VolumeLoadError(f"{path}: unsupported datatype code {hdr['datatype']}")
    dtype = np.dtype(_DTYPES[hdr["datatype"]]).newbyteorder(hdr["byteorder"])

    offset = max(hdr["vox_offset"], HEADER_SIZE)
    n_vox = int(np.prod(shape3, dtype=np.int64))
    nbytes = n_vox * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise VolumeLoadError(f"{path}: truncated data section")
    data = np.frombuffer(raw, dtype=dtype, count=n_vox, offset=offset)
    data = data.reshape(shape3, order="F")
    data = np.asarray(data, dtype=dtype.newbyteorder("="))

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope not in (0.0, 1.0) or (slope == 1.0 and inter != 0.0):
        data = data.astype(np.float32) * slope + inter

    spacing = [abs(float(hdr["pixdim"][k])) for k in (1, 2, 3)]
    affine = _affine_from_header(hdr)
    perm, flips = _canonical_orientation(affine)

    # reorder so that output axis i comes from the data axis with dominant
    # world direction i, flipping negated axes
    src_for_world = [perm.index(i) for i in range(3)]
    data = np.transpose(data, src_for_world)
    spacing = [spacing[j] for j in src_for_world]
    for i, j in enumerate(src_for_world):
        if flips[j]:
            data = np.flip(data, axis=i)
    data = np.ascontiguousarray(data)

    for k, s in enumerate(spacing):
        if not np.isfinite(s) or s <= 0:
            spacing[k] = 1.0
    return data, tuple(spacing)


def write_nifti(path, data, spacing):
    """Write a 3D array as single-file NIfTI-1 (.nii or .nii.gz).

    gzip output uses mtime=0 so identical data produces identical bytes.
    """
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected 3D data, got shape {data.shape}")
    if np.dtype(data.dtype) not in _DTYPE_CODES:
        data = data.astype(np.float32)
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"invalid spacing {spacing}")

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _DTYPE_CODES[np.dtype(data.dtype)])
    struct.pack_into("<h", hdr, 72, data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<h", hdr, 252, 0)  # qform_code
    struct.pack_into("<h", hdr, 254, 1)  # sform_code: scanner
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], 0.0)
    hdr[344:348] = b"n+1\x00"

    payload = bytes(hdr) + b"\x00" * 4 + np.asfortranarray(data).tobytes(order="F")
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.name.endswith(".gz"):
        # filename="" and mtime=0 keep the gzip header content-only
        with open(path, "wb") as fh:
            with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        path.write_bytes(payload)
