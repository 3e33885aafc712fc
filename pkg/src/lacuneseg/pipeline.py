"""Full prediction path: normalize, detect, mask, segment, mask, border.

Stage order is fixed and recorded in the result's provenance: z-score
normalization, 64x64 gridding per slice, x4 nearest-neighbour upsampling,
stage-1 detection, downsampling and reconstruction into a 3D candidate map,
prevalence masking of candidates, 32x32 candidate-centered segmentation,
a final prevalence masking, and the 1-pixel in-plane pseudo-uncertainty
border. The prevalence mask is applied twice on purpose: once to prune
candidates, once as a final guard on the segmentation.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .detector import DetectorModel, candidates_from_detections, detect
from .errors import NonBinaryMaskError, PipelineStageError
from .patches import compute_grid, extract_patches, upsample_nn
from .prevalence import apply_mask
from .segmenter import SegmenterModel, resolve_threshold, segment_candidates
from .volume import MultiModalCase, Volume3D, normalize_case, slice_stack

IN_PLANE_8 = np.ones((3, 3), dtype=bool)


@dataclass
class SegmentationResult:
    segmentation: Volume3D
    uncertainty: Volume3D
    provenance: dict = field(default_factory=dict)
    detections: list = field(default_factory=list)


def make_uncertainty(seg: Volume3D) -> Volume3D:
    """1-pixel in-plane border outside the segmentation (8-connected ring)."""
    data = seg.data
    if not np.isin(data, (0, 1)).all():
        raise NonBinaryMaskError("uncertainty input must be binary")
    out = np.zeros(seg.shape, dtype=np.uint8)
    for z in range(seg.shape[2]):
        plane = data[:, :, z].astype(bool)
        if not plane.any():
            continue
        ring = ndimage.binary_dilation(plane, structure=IN_PLANE_8) & ~plane
        out[:, :, z] = ring
    return Volume3D(out, seg.spacing)


def _config_digest(config) -> str:
    payload = json.dumps(asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _volume_digest(vol: Volume3D) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(vol.data).tobytes())
    h.update(np.asarray(vol.spacing, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def predict_case(
    case: MultiModalCase,
    detector: DetectorModel,
    segmenter: SegmenterModel,
    subject_mask: Volume3D,
    detector_config=None,
    segmenter_config=None,
) -> SegmentationResult:
    """Run the two-stage pipeline on one co-registered case."""
    dconf = detector_config or detector.config
    sconf = segmenter_config or segmenter.config
    stages = []
    state = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            raise PipelineStageError(name, exc) from exc
        stages.append({"stage": name, "seconds": round(time.perf_counter() - t0, 4)})
        return result

    def _normalize():
        return normalize_case(case)

    def _detect():
        norm = state["normalized"]
        grid = compute_grid(case.shape[:2], dconf.patch_size, dconf.overlap)
        dets = []
        for z in range(case.shape[2]):
            stack = slice_stack(norm, z)
            for patch in extract_patches(stack, grid):
                up = upsample_nn(patch, dconf.upsample_factor)
                dets.extend(detect(detector, up, in_plane_spacing=case.spacing[:2]))
        state["grid"] = grid
        return dets

    def _candidates():
        return candidates_from_detections(
            state["detections"], case.shape, case.spacing, dconf.upsample_factor,
            grid=state["grid"],
        )

    def _mask_candidates():
        return apply_mask(state["candidates"], subject_mask)

    def _segment():
        return segment_candidates(
            case, state["masked_candidates"], subject_mask, segmenter, sconf
        )

    def _mask_final():
        return apply_mask(state["segmentation"], subject_mask)

    def _uncertainty():
        return make_uncertainty(state["final"])

    state["normalized"] = stage("normalize", _normalize)
    state["detections"] = stage("detect", _detect)
    state["candidates"] = stage("reconstruct_candidates", _candidates)
    state["masked_candidates"] = stage("prevalence_mask_candidates", _mask_candidates)
    state["segmentation"] = stage("segment", _segment)
    state["final"] = stage("prevalence_mask_final", _mask_final)
    uncertainty = stage("uncertainty", _uncertainty)

    provenance = {
        "case_id": case.case_id,
        "stages": stages,
        "detector": {"kind": detector.kind, "config_digest": _config_digest(dconf)},
        "segmenter": {
            "kind": segmenter.kind,
            "config_digest": _config_digest(sconf),
            "threshold": resolve_threshold(segmenter, sconf),
        },
        "prevalence_mask_digest": _volume_digest(subject_mask),
        "n_stage1_detections": len(state["detections"]),
        "output_digests": {
            "segmentation": _volume_digest(state["final"]),
            "uncertainty": _volume_digest(uncertainty),
        },
    }
    return SegmentationResult(
        segmentation=state["final"],
        uncertainty=uncertainty,
        provenance=provenance,
        detections=state["detections"],
    )
