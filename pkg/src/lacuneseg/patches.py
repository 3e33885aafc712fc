"""Deterministic 2D patch gridding, extraction, NN resampling, reconstruction.

Grids cover every pixel: origins advance by stride = round(patch * (1 - overlap))
and the final origin per axis is clamped to plane_dim - patch, so no padding is
ever fabricated. Patch coordinates are (row, col) top-left offsets within the
plane; channels are stored (C, size, size) with C in {1, 3}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryMismatchError
from .volume import SliceStack


@dataclass
class PatchGrid:
    patch_size: int
    stride: int
    origins: list  # [(row, col)] row-major, unique
    plane_shape: tuple

    @property
    def n_patches(self):
        return len(self.origins)


@dataclass
class Patch2D:
    origin: tuple
    size: int
    channels: np.ndarray = field(repr=False)  # (C, size, size)
    slice_index: int = 0

    def __post_init__(self):
        self.channels = np.asarray(self.channels)
        if self.channels.ndim == 2:
            self.channels = self.channels[np.newaxis]
        c, h, w = self.channels.shape
        if h != self.size or w != self.size:
            raise GeometryMismatchError(
                f"patch channels {self.channels.shape} do not match size {self.size}"
            )


def _axis_origins(dim, patch, stride):
    origins = list(range(0, dim - patch + 1, stride))
    last = dim - patch
    if origins[-1] != last:
        origins.append(last)
    return origins


def compute_grid(plane_shape, patch_size, overlap_fraction):
    """Row-major grid of top-left origins covering the whole plane."""
    rows, cols = int(plane_shape[0]), int(plane_shape[1])
    patch_size = int(patch_size)
    if patch_size > rows or patch_size > cols:
        raise GeometryMismatchError(
            f"patch {patch_size} larger than plane {plane_shape}"
        )
    if not 0 <= overlap_fraction < 1:
        raise ValueError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    stride = max(1, round(patch_size * (1.0 - overlap_fraction)))
    origins = [
        (r, c)
        for r in _axis_origins(rows, patch_size, stride)
        for c in _axis_origins(cols, patch_size, stride)
    ]
    return PatchGrid(
        patch_size=patch_size, stride=stride, origins=origins, plane_shape=(rows, cols)
    )


def extract_patches(stack, grid: PatchGrid):
    """Copy one Patch2D per grid origin out of a SliceStack or 2D plane."""
    if isinstance(stack, SliceStack):
        planes = stack.channels
        slice_index = stack.slice_index
    else:
        planes = np.asarray(stack)
        if planes.ndim == 2:
            planes = planes[np.newaxis]
        slice_index = 0
    if planes.shape[1:] != tuple(grid.plane_shape):
        raise GeometryMismatchError(
            f"plane shape {planes.shape[1:]} does not match grid {grid.plane_shape}"
        )
    s = grid.patch_size
    return [
        Patch2D(
            origin=(r, c),
            size=s,
            channels=planes[:, r : r + s, c : c + s].copy(),
            slice_index=slice_index,
        )
        for r, c in grid.origins
    ]


def upsample_nn(p: Patch2D, factor: int) -> Patch2D:
    """Nearest-neighbour upsampling: each pixel becomes a factor x factor block."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return Patch2D(p.origin, p.size, p.channels.copy(), p.slice_index)
    up = np.repeat(np.repeat(p.channels, factor, axis=1), factor, axis=2)
    return Patch2D(p.origin, p.size * factor, up, p.slice_index)


def downsample_nn(p: Patch2D, factor: int, binarize=False) -> Patch2D:
    """Block sampling: output (i, j) = input (i*factor, j*factor).

    With binarize, the patch is thresholded at 0.5 first (for mask patches),
    so downsample_nn inverts upsample_nn exactly for binary inputs too.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if p.size % factor != 0:
        raise GeometryMismatchError(f"size {p.size} not divisible by factor {factor}")
    channels = p.channels
    if binarize:
        channels = (channels >= 0.5).astype(np.uint8)
    down = channels[:, ::factor, ::factor].copy()
    return Patch2D(p.origin, p.size // factor, down, p.slice_index)


def reconstruct(patches, grid: PatchGrid, fusion="mean"):
    """Fuse patches back into a full plane.

    mean: count-normalized average of all covering patches. Computed as
    first + sum(value - first) / count, which makes the roundtrip
    reconstruct(extract(P, g), g, mean) == P bit-exact for every legal grid
    (the deltas of identical covering values are exactly zero). max: voxelwise
    maximum, the OR fusion used for binary candidate masks. Pixels covered by
    no patch are 0.
    """
    if not patches:
        raise ValueError("no patches to reconstruct")
    if fusion not in ("mean", "max"):
        raise ValueError(f"unknown fusion {fusion!r}")
    s = patches[0].size
    n_channels = patches[0].channels.shape[0]
    grid_origins = set(grid.origins)
    rows, cols = grid.plane_shape
    for p in patches:
        if p.size != s or p.channels.shape[0] != n_channels:
            raise GeometryMismatchError("patches have inconsistent sizes or channels")
        if tuple(p.origin) not in grid_origins:
            raise GeometryMismatchError(f"patch origin {p.origin} not in grid")

    if fusion == "max":
        out = np.zeros((n_channels, rows, cols), dtype=np.float64)
        for p in patches:
            r, c = p.origin
            window = out[:, r : r + s, c : c + s]
            np.maximum(window, p.channels, out=window)
        return out[0] if n_channels == 1 else out

    first = np.zeros((n_channels, rows, cols), dtype=np.float64)
    deltas = np.zeros((n_channels, rows, cols), dtype=np.float64)
    count = np.zeros((rows, cols), dtype=np.int64)
    assigned = np.zeros((rows, cols), dtype=bool)
    for p in patches:
        r, c = p.origin
        win = (slice(r, r + s), slice(c, c + s))
        fresh = ~assigned[win]
        if fresh.any():
            first[:, win[0], win[1]][:, fresh] = np.asarray(p.channels, dtype=np.float64)[
                :, fresh
            ]
            assigned[win] |= fresh
        deltas[:, win[0], win[1]] += p.channels - first[:, win[0], win[1]]
        count[win] += 1
    out = first + deltas / np.maximum(count, 1)[np.newaxis]
    return out[0] if n_channels == 1 else out
