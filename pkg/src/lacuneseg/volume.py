"""Multi-modal volume model: loading, validation, normalization, slicing.

All 2D processing in this package is axial: a slice at index z is the plane
data[:, :, z] with rows indexing x and columns indexing y.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    DegenerateVolumeError,
    GeometryMismatchError,
    NonBinaryMaskError,
    VolumeLoadError,
)
from .nifti import read_nifti

SPACING_RTOL = 1e-4  # spacings live in float32 headers


@dataclass
class Volume3D:
    """A scalar grid indexed (x, y, z) with physical voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise GeometryMismatchError(f"expected 3D data, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise GeometryMismatchError(f"spacing must be 3 positive values, got {self.spacing}")
        if any(n < 1 for n in self.data.shape):
            raise GeometryMismatchError(f"degenerate shape {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape

    def same_grid_as(self, other: "Volume3D") -> bool:
        return self.shape == other.shape and np.allclose(
            self.spacing, other.spacing, rtol=SPACING_RTOL
        )


@dataclass
class MultiModalCase:
    """Co-registered T1/T2/FLAIR volumes plus an optional binary truth mask."""

    case_id: str
    t1: Volume3D
    t2: Volume3D
    flair: Volume3D
    truth: Optional[Volume3D] = None

    def __post_init__(self):
        for name, vol in (("t2", self.t2), ("flair", self.flair)):
            if vol.shape != self.t1.shape:
                raise GeometryMismatchError(
                    f"{self.case_id}: {name} shape {vol.shape} != t1 shape {self.t1.shape}"
                )
            if not np.allclose(vol.spacing, self.t1.spacing, rtol=SPACING_RTOL):
                raise GeometryMismatchError(
                    f"{self.case_id}: {name} spacing {vol.spacing} != t1 spacing {self.t1.spacing}"
                )
        if self.truth is not None:
            if not self.truth.same_grid_as(self.t1):
                raise GeometryMismatchError(f"{self.case_id}: truth grid differs from modalities")
            _check_binary(self.truth.data, f"{self.case_id}: truth")

    @property
    def shape(self):
        return self.t1.shape

    @property
    def spacing(self):
        return self.t1.spacing

    def modalities(self):
        return (self.t1, self.t2, self.flair)


@dataclass
class SliceStack:
    """Three co-indexed axial planes at one slice, ordered (T1, T2, FLAIR)."""

    slice_index: int
    channels: np.ndarray = field(repr=False)  # (3, rows, cols)

    def __post_init__(self):
        self.channels = np.asarray(self.channels)
        if self.channels.ndim != 3 or self.channels.shape[0] != 3:
            raise GeometryMismatchError(
                f"expected channels (3, rows, cols), got {self.channels.shape}"
            )

    @property
    def plane_shape(self):
        return self.channels.shape[1:]


def _check_binary(data, what):
    bad = ~np.isin(data, (0, 1))
    if bad.any():
        values = np.unique(np.asarray(data)[bad])[:5]
        raise NonBinaryMaskError(f"{what}: mask contains non-binary values {values}")


def _load_volume(path, what):
    data, spacing = read_nifti(path)
    if not np.isfinite(data).all():
        raise VolumeLoadError(f"{what} ({path}): volume contains NaN/Inf voxels")
    return Volume3D(np.asarray(data, dtype=np.float32), spacing)


def load_case(t1_path, t2_path, flair_path, truth_path=None, case_id=None):
    """Load and cross-validate one subject's co-registered volumes.

    Shapes and spacings must agree across modalities; a truth mask must be
    strictly binary.
    """
    t1 = _load_volume(t1_path, "t1")
    t2 = _load_volume(t2_path, "t2")
    flair = _load_volume(flair_path, "flair")
    truth = None
    if truth_path is not None:
        raw = _load_volume(truth_path, "truth")
        _check_binary(raw.data, f"truth ({truth_path})")
        truth = Volume3D(raw.data.astype(np.uint8), raw.spacing)
    if case_id is None:
        case_id = _infer_case_id(t1_path)
    return MultiModalCase(case_id=case_id, t1=t1, t2=t2, flair=flair, truth=truth)


def _infer_case_id(t1_path):
    p = Path(t1_path)
    stem = p.name
    for suffix in (".nii.gz", ".nii"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
            break
    return p.parent.name if stem in ("t1", "T1") else stem


def fuse_truth_masks(masks, mode="union"):
    """Fuse several observers' binary masks into one (union or intersection)."""
    if not masks:
        raise ValueError("no masks to fuse")
    for m in masks:
        _check_binary(m.data, "observer mask")
        if not m.same_grid_as(masks[0]):
            raise GeometryMismatchError("observer masks are on different grids")
    stack = np.stack([m.data.astype(bool) for m in masks])
    if mode == "union":
        fused = stack.any(axis=0)
    elif mode == "intersection":
        fused = stack.all(axis=0)
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return Volume3D(fused.astype(np.uint8), masks[0].spacing)


def zscore_normalize(v: Volume3D, foreground_only=False) -> Volume3D:
    """Zero-mean unit-variance normalization over the whole volume.

    Uses the population standard deviation (divisor N). With foreground_only,
    statistics come from nonzero voxels but the transform is applied globally
    (intended for skull-stripped data).
    """
    data = np.asarray(v.data, dtype=np.float64)
    if data.size < 2:
        raise DegenerateVolumeError("volume has fewer than 2 voxels")
    sample = data[data != 0] if foreground_only else data
    if sample.size < 2:
        raise DegenerateVolumeError("too few foreground voxels to normalize")
    mean = sample.mean()
    std = sample.std()
    if std == 0 or not np.isfinite(std):
        raise DegenerateVolumeError("constant volume has zero variance")
    return Volume3D((data - mean) / std, v.spacing)


def normalize_case(case: MultiModalCase) -> MultiModalCase:
    """z-score each modality independently; truth passes through unchanged."""
    return MultiModalCase(
        case_id=case.case_id,
        t1=zscore_normalize(case.t1),
        t2=zscore_normalize(case.t2),
        flair=zscore_normalize(case.flair),
        truth=case.truth,
    )


def slice_stack(case: MultiModalCase, z: int) -> SliceStack:
    """The three co-indexed axial planes at slice z."""
    nz = case.shape[2]
    if not 0 <= z < nz:
        raise IndexError(f"slice index {z} out of range [0, {nz})")
    channels = np.stack([m.data[:, :, z] for m in case.modalities()])
    return SliceStack(slice_index=int(z), channels=channels)
