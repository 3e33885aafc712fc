import numpy as np
import pytest
from scipy import ndimage

from lacuneseg.detector import DetectorConfig, DetectorModel
from lacuneseg.errors import NonBinaryMaskError, PipelineStageError
from lacuneseg.metrics import lesionwise_counts
from lacuneseg.phantom import PhantomSpec, generate_phantom
from lacuneseg.pipeline import make_uncertainty, predict_case
from lacuneseg.segmenter import SegmenterConfig, SegmenterModel
from lacuneseg.volume import Volume3D

IN_PLANE_8 = np.ones((3, 3), dtype=bool)


class TestMakeUncertainty:
    def test_interior_voxel_ring(self):
        segv = np.zeros((7, 7, 3), dtype=np.uint8)
        segv[3, 3, 1] = 1
        out = make_uncertainty(Volume3D(segv, (1, 1, 1)))
        assert out.data[:, :, 1].sum() == 8
        assert out.data[3, 3, 1] == 0
        assert out.data[:, :, 0].sum() == 0  # strictly in-plane

    def test_corner_voxel_clipped(self):
        segv = np.zeros((5, 5, 1), dtype=np.uint8)
        segv[0, 0, 0] = 1
        out = make_uncertainty(Volume3D(segv, (1, 1, 1)))
        assert out.data.sum() == 3

    def test_empty_input(self):
        segv = np.zeros((5, 5, 2), dtype=np.uint8)
        out = make_uncertainty(Volume3D(segv, (1, 1, 1)))
        assert out.data.sum() == 0

    def test_non_binary_rejected(self):
        with pytest.raises(NonBinaryMaskError):
            make_uncertainty(Volume3D(np.full((3, 3, 1), 0.5), (1, 1, 1)))

    def test_border_properties_on_random_volumes(self):
        rng = np.random.default_rng(0)
        for seed in range(10):
            segv = (rng.random((12, 12, 4)) < 0.15).astype(np.uint8)
            out = make_uncertainty(Volume3D(segv, (1, 1, 1))).data
            assert not (out & segv).any()
            for z in range(4):
                ring, plane = out[:, :, z].astype(bool), segv[:, :, z].astype(bool)
                if ring.any():
                    near_seg = ndimage.binary_dilation(plane, structure=IN_PLANE_8)
                    assert (ring <= near_seg).all()  # each ring voxel touches seg
                # every boundary voxel of seg has a ring neighbour
                interior = ndimage.binary_erosion(plane, structure=IN_PLANE_8, border_value=1)
                boundary = plane & ~interior
                if boundary.any():
                    near_ring = ndimage.binary_dilation(ring, structure=IN_PLANE_8)
                    assert (boundary <= near_ring).all()


@pytest.fixture(scope="module")
def decoy_phantom():
    spec = PhantomSpec(
        shape=(96, 96, 48),
        n_lacunes=2,
        n_decoys_outside_region=2,
        diameter_range_mm=(4.0, 8.0),
        seed=21,
    )
    return generate_phantom(spec)


@pytest.fixture(scope="module")
def pipeline_result(decoy_phantom, module_rule_models):
    detector, segmenter = module_rule_models
    return predict_case(
        decoy_phantom.case, detector, segmenter, decoy_phantom.region_mask
    )


@pytest.fixture(scope="module")
def module_rule_models():
    detector = DetectorModel(kind="rule_based", config=DetectorConfig(model="rule_based"))
    segmenter = SegmenterModel(kind="rule_based", config=SegmenterConfig(model="rule_based"))
    return detector, segmenter


class TestPredictCase:
    def test_decoys_removed_lacunes_found(self, decoy_phantom, pipeline_result):
        seg = pipeline_result.segmentation.data
        tp, _, fn = lesionwise_counts(seg, decoy_phantom.case.truth.data)
        assert tp == 2 and fn == 0
        decoy_tp, _, _ = lesionwise_counts(seg, decoy_phantom.decoy_mask.data)
        assert decoy_tp == 0

    def test_result_geometry_and_invariants(self, decoy_phantom, pipeline_result):
        seg = pipeline_result.segmentation
        unc = pipeline_result.uncertainty
        assert seg.shape == decoy_phantom.case.shape
        assert set(np.unique(seg.data)) <= {0, 1}
        assert not (seg.data & unc.data).any()

    def test_stage_order_recorded(self, pipeline_result):
        stages = [s["stage"] for s in pipeline_result.provenance["stages"]]
        assert stages == [
            "normalize",
            "detect",
            "reconstruct_candidates",
            "prevalence_mask_candidates",
            "segment",
            "prevalence_mask_final",
            "uncertainty",
        ]

    def test_segmentation_inside_prior_components_only(self, decoy_phantom, pipeline_result):
        # every output component overlaps the subject mask (the masking guard)
        seg = pipeline_result.segmentation.data
        labels, n = ndimage.label(seg, structure=np.ones((3, 3, 3)))
        region = decoy_phantom.region_mask.data.astype(bool)
        for comp in range(1, n + 1):
            assert region[labels == comp].any()

    def test_deterministic_rerun(self, decoy_phantom, module_rule_models, pipeline_result):
        detector, segmenter = module_rule_models
        again = predict_case(
            decoy_phantom.case, detector, segmenter, decoy_phantom.region_mask
        )
        assert np.array_equal(again.segmentation.data, pipeline_result.segmentation.data)
        assert np.array_equal(again.uncertainty.data, pipeline_result.uncertainty.data)
        assert (
            again.provenance["output_digests"] == pipeline_result.provenance["output_digests"]
        )

    def test_empty_case_empty_result(self, module_rule_models):
        from conftest import subject_mask_for

        detector, segmenter = module_rule_models
        ph = generate_phantom(
            PhantomSpec(shape=(64, 64, 16), n_lacunes=0, n_decoys_outside_region=0, seed=3)
        )
        res = predict_case(ph.case, detector, segmenter, subject_mask_for(ph))
        assert res.segmentation.data.sum() == 0
        assert res.uncertainty.data.sum() == 0

    def test_stage_error_wrapped_with_name(self, decoy_phantom, module_rule_models):
        detector, segmenter = module_rule_models
        bad_mask = Volume3D(
            np.zeros((10, 10, 10), dtype=np.uint8), decoy_phantom.case.spacing
        )
        with pytest.raises(PipelineStageError) as err:
            predict_case(decoy_phantom.case, detector, segmenter, bad_mask)
        assert err.value.stage == "prevalence_mask_candidates"

    def test_masking_never_grows_segmentation(self, decoy_phantom, module_rule_models):
        """The final output is a subset of what an unmasked run segments."""
        detector, segmenter = module_rule_models
        masked = predict_case(
            decoy_phantom.case, detector, segmenter, decoy_phantom.region_mask
        )
        everywhere = Volume3D(
            np.ones(decoy_phantom.case.shape, dtype=np.uint8), decoy_phantom.case.spacing
        )
        unmasked = predict_case(decoy_phantom.case, detector, segmenter, everywhere)
        assert (masked.segmentation.data <= unmasked.segmentation.data).all()

    def test_uncertainty_matches_segmentation_ring(self, pipeline_result):
        expected = make_uncertainty(pipeline_result.segmentation)
        assert np.array_equal(pipeline_result.uncertainty.data, expected.data)

    def test_output_slices_within_detected_slices(self, pipeline_result):
        seg_slices = set(np.nonzero(pipeline_result.segmentation.data)[2].tolist())
        det_slices = {d.slice_index for d in pipeline_result.detections}
        assert seg_slices <= det_slices
