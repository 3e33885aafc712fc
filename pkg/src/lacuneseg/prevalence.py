"""Lesion prevalence map: cohort aggregation, post-processing, FP masking.

The map is built in a common (atlas) space from registered binary lesion
masks, made left-right symmetric, binarized, dilated by a physical radius, and
cleaned of CSF. Applied in subject space, it keeps or removes whole predicted
components depending on overlap. Deformable registration itself is out of
scope: subject-space maps are consumed precomputed, or produced by a
user-configured external command.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import GeometryMismatchError, NonBinaryMaskError, RegistrationError
from .nifti import read_nifti, write_nifti
from .volume import Volume3D

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass
class MapProvenance:
    n_subjects: int
    dilation_mm: float = 0.0
    symmetrized: bool = False
    csf_excluded: bool = False


@dataclass
class PrevalenceMap:
    """Voxelwise lesion frequency plus its post-processed binary mask form."""

    frequency: Volume3D
    mask: Volume3D
    provenance: MapProvenance = field(default_factory=lambda: MapProvenance(0))

    def __post_init__(self):
        f = self.frequency.data
        if f.min() < 0 or f.max() > 1:
            raise ValueError("frequency values must lie in [0, 1]")
        _require_binary(self.mask.data, "prevalence mask")
        if not self.frequency.same_grid_as(self.mask):
            raise GeometryMismatchError("frequency and mask grids differ")


def _require_binary(data, what):
    if not np.isin(data, (0, 1)).all():
        raise NonBinaryMaskError(f"{what} is not binary")


def build_frequency(masks) -> PrevalenceMap:
    """Aggregate registered binary masks into a voxelwise frequency map.

    frequency(v) = fraction of masks with a 1 at v. The initial binary mask is
    frequency > 0 (any observed lesion location counts).
    """
    if not masks:
        raise ValueError("need at least one mask")
    ref = masks[0]
    for m in masks:
        _require_binary(m.data, "lesion mask")
        if not m.same_grid_as(ref):
            raise GeometryMismatchError("lesion masks are on different grids")
    acc = np.zeros(ref.shape, dtype=np.float64)
    for m in masks:
        acc += m.data
    freq = acc / len(masks)
    return PrevalenceMap(
        frequency=Volume3D(freq, ref.spacing),
        mask=Volume3D((freq > 0).astype(np.uint8), ref.spacing),
        provenance=MapProvenance(n_subjects=len(masks)),
    )


def symmetrize(m: PrevalenceMap, midline_axis=0) -> PrevalenceMap:
    """Mirror across the given axis, fusing with voxelwise max.

    Output equals its own mirror exactly and is a fixed point of this
    operation.
    """
    freq = np.maximum(m.frequency.data, np.flip(m.frequency.data, axis=midline_axis))
    mask = np.maximum(m.mask.data, np.flip(m.mask.data, axis=midline_axis))
    return PrevalenceMap(
        frequency=Volume3D(freq, m.frequency.spacing),
        mask=Volume3D(mask.astype(np.uint8), m.mask.spacing),
        provenance=replace(m.provenance, symmetrized=True),
    )


def ball_structure(spacing, radius_mm):
    """Voxel offsets within Euclidean physical distance radius_mm."""
    half = [int(np.floor(radius_mm / s)) for s in spacing]
    grids = np.meshgrid(
        *[np.arange(-h, h + 1) * s for h, s in zip(half, spacing)], indexing="ij"
    )
    dist2 = sum(g * g for g in grids)
    return dist2 <= radius_mm * radius_mm


def dilate_mm(binary: Volume3D, radius_mm) -> Volume3D:
    """Morphological dilation with a physical-radius Euclidean ball.

    Honours anisotropic spacing: output(v) = 1 iff some set voxel lies within
    radius_mm of v in mm.
    """
    if radius_mm <= 0:
        raise ValueError(f"radius must be positive, got {radius_mm}")
    _require_binary(binary.data, "dilation input")
    structure = ball_structure(binary.spacing, radius_mm)
    if structure.sum() <= 1:
        return Volume3D(binary.data.astype(np.uint8), binary.spacing)
    dilated = ndimage.binary_dilation(binary.data.astype(bool), structure=structure)
    return Volume3D(dilated.astype(np.uint8), binary.spacing)


def dilate_map(m: PrevalenceMap, radius_mm) -> PrevalenceMap:
    """Dilate the map's binary mask form; the frequency volume is untouched."""
    return PrevalenceMap(
        frequency=m.frequency,
        mask=dilate_mm(m.mask, radius_mm),
        provenance=replace(m.provenance, dilation_mm=float(radius_mm)),
    )


def remove_csf(m: PrevalenceMap, csf_mask: Volume3D) -> PrevalenceMap:
    """Zero the mask wherever the CSF mask is set."""
    _require_binary(csf_mask.data, "CSF mask")
    if not csf_mask.same_grid_as(m.mask):
        raise GeometryMismatchError("CSF mask grid differs from map grid")
    cleaned = m.mask.data.astype(np.uint8) * (1 - csf_mask.data.astype(np.uint8))
    return PrevalenceMap(
        frequency=m.frequency,
        mask=Volume3D(cleaned, m.mask.spacing),
        provenance=replace(m.provenance, csf_excluded=True),
    )


def resample_to_subject(m: PrevalenceMap, transform_spec, reference: Volume3D = None) -> Volume3D:
    """Produce the subject-space binary mask named by transform_spec.

    transform_spec forms:
      {"kind": "identity"}                     map already on the subject grid
      {"kind": "precomputed", "path": ...}     load a precomputed subject mask
      {"kind": "command", "template": ...}     run an external registration
                                               command with {fixed}, {moving},
                                               {out} placeholders; {fixed} is
                                               the reference volume path.
    """
    kind = transform_spec.get("kind")
    if kind == "identity":
        out = Volume3D(m.mask.data.astype(np.uint8), m.mask.spacing)
    elif kind == "precomputed":
        path = transform_spec.get("path")
        if not path or not Path(path).exists():
            raise RegistrationError(f"precomputed subject mask not found: {path}")
        data, spacing = read_nifti(path)
        _require_binary(data, f"subject mask {path}")
        out = Volume3D(data.astype(np.uint8), spacing)
    elif kind == "command":
        template = transform_spec.get("template", "")
        if not all(k in template for k in ("{fixed}", "{moving}", "{out}")):
            raise RegistrationError(
                "command template must contain {fixed}, {moving}, and {out}"
            )
        if reference is None:
            raise RegistrationError("command transform needs a reference volume")
        with tempfile.TemporaryDirectory(prefix="lacuneseg_reg_") as tmp:
            fixed = str(Path(tmp) / "fixed.nii.gz")
            moving = str(Path(tmp) / "moving.nii.gz")
            out_path = str(Path(tmp) / "subject_mask.nii.gz")
            write_nifti(fixed, reference.data, reference.spacing)
            write_nifti(moving, m.mask.data, m.mask.spacing)
            cmd = template.format(fixed=fixed, moving=moving, out=out_path)
            proc = subprocess.run(
                shlex.split(cmd), capture_output=True, text=True, check=False
            )
            if proc.returncode != 0:
                raise RegistrationError(
                    f"registration command failed (exit {proc.returncode}): "
                    f"stdout={proc.stdout.strip()!r} stderr={proc.stderr.strip()!r}"
                )
            if not Path(out_path).exists():
                raise RegistrationError("registration command produced no output file")
            data, spacing = read_nifti(out_path)
            out = Volume3D((np.asarray(data) >= 0.5).astype(np.uint8), spacing)
    else:
        raise RegistrationError(f"unknown transform kind {kind!r}")

    if reference is not None and not out.same_grid_as(reference):
        raise GeometryMismatchError(
            f"subject mask grid {out.shape}/{out.spacing} does not match "
            f"reference {reference.shape}/{reference.spacing}"
        )
    return out


def apply_mask(pred: Volume3D, subject_mask: Volume3D) -> Volume3D:
    """Keep each 26-connected predicted component iff it touches the mask.

    Components with at least one voxel inside subject_mask are kept in full;
    components with zero overlap are removed entirely. Never adds voxels.
    """
    _require_binary(pred.data, "prediction")
    _require_binary(subject_mask.data, "subject mask")
    if not pred.same_grid_as(subject_mask):
        raise GeometryMismatchError("prediction and subject mask grids differ")
    labels, n = ndimage.label(pred.data, structure=CONNECTIVITY_26)
    if n == 0:
        return Volume3D(np.zeros_like(pred.data, dtype=np.uint8), pred.spacing)
    overlapping = np.unique(labels[subject_mask.data.astype(bool)])
    overlapping = overlapping[overlapping > 0]
    kept = np.isin(labels, overlapping) & (labels > 0)
    return Volume3D(kept.astype(np.uint8), pred.spacing)
