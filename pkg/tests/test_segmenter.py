import numpy as np
import pytest

import lacuneseg.segmenter as seg
from lacuneseg.errors import ConfigError, EmptyDatasetError, GeometryMismatchError
from lacuneseg.metrics import dice
from lacuneseg.patches import Patch2D
from lacuneseg.volume import Volume3D


class TestConfig:
    def test_defaults_follow_stated_values(self):
        cfg = seg.SegmenterConfig()
        assert cfg.patch_size == 32
        assert cfg.overlap == 0.5
        assert cfg.lacune_background_ratio == (0.10, 0.90)
        assert cfg.epochs == 30

    def test_ratio_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            seg.SegmenterConfig(lacune_background_ratio=(0.2, 0.9))

    def test_odd_patch_rejected(self):
        with pytest.raises(ConfigError):
            seg.SegmenterConfig(patch_size=33)

    def test_threshold_validation(self):
        seg.SegmenterConfig(threshold="optimize")
        with pytest.raises(ConfigError):
            seg.SegmenterConfig(threshold="auto")
        with pytest.raises(ConfigError):
            seg.SegmenterConfig(threshold=1.2)


class TestSampling:
    def test_ratio_realized_within_one(self, small_phantom):
        case, region = small_phantom.case, small_phantom.region_mask
        for ratio in ((0.5, 0.5), (0.25, 0.75), (0.1, 0.9)):
            samples = seg.sample_training_patches(
                [case], [region], ratio=ratio, seed=0, n_positives=10
            )
            n_pos = sum(s["is_positive"] for s in samples)
            n_bg = len(samples) - n_pos
            assert n_pos == 10
            assert abs(n_bg - round(10 * ratio[1] / ratio[0])) <= 1

    def test_ten_ninety_ratio_counts(self, small_phantom):
        samples = seg.sample_training_patches(
            [small_phantom.case], [small_phantom.region_mask], ratio=(0.1, 0.9),
            seed=0, n_positives=10,
        )
        assert sum(s["is_positive"] for s in samples) == 10
        assert sum(not s["is_positive"] for s in samples) == 90

    def test_positive_patches_centered_on_truth(self, small_phantom):
        samples = seg.sample_training_patches(
            [small_phantom.case], [small_phantom.region_mask], seed=1, n_positives=5
        )
        truth = small_phantom.case.truth.data
        for s in samples:
            if s["is_positive"]:
                x, y, z = s["center"]
                assert truth[x, y, z] == 1
                assert s["truth"].any()

    def test_background_centers_in_prior_without_truth(self, small_phantom):
        samples = seg.sample_training_patches(
            [small_phantom.case], [small_phantom.region_mask], seed=1, n_positives=5
        )
        truth = small_phantom.case.truth.data
        region = small_phantom.region_mask.data
        for s in samples:
            if not s["is_positive"]:
                x, y, z = s["center"]
                assert region[x, y, z] == 1 and truth[x, y, z] == 0

    def test_seeded_determinism(self, small_phantom):
        kw = dict(ratio=(0.1, 0.9), seed=7, n_positives=8)
        a = seg.sample_training_patches([small_phantom.case], [small_phantom.region_mask], **kw)
        b = seg.sample_training_patches([small_phantom.case], [small_phantom.region_mask], **kw)
        assert [s["center"] for s in a] == [s["center"] for s in b]
        assert all(np.array_equal(x["channels"], y["channels"]) for x, y in zip(a, b))

    def test_no_positives_rejected(self, small_phantom):
        empty = Volume3D(np.zeros_like(small_phantom.case.truth.data), small_phantom.case.spacing)
        case = type(small_phantom.case)(
            "empty", small_phantom.case.t1, small_phantom.case.t2, small_phantom.case.flair, empty
        )
        with pytest.raises(EmptyDatasetError, match="positive"):
            seg.sample_training_patches([case], [small_phantom.region_mask])

    def test_empty_prior_rejected(self, small_phantom):
        empty = Volume3D(np.zeros_like(small_phantom.region_mask.data), small_phantom.case.spacing)
        with pytest.raises(EmptyDatasetError):
            seg.sample_training_patches([small_phantom.case], [empty])

    def test_patch_geometry(self, small_phantom):
        samples = seg.sample_training_patches(
            [small_phantom.case], [small_phantom.region_mask], seed=0, n_positives=4
        )
        for s in samples:
            assert s["channels"].shape == (3, 32, 32)
            assert s["truth"].shape == (32, 32)


class TestOptimizeThreshold:
    def test_exact_binary_predictions_tie_break_low(self):
        truth = np.zeros((8, 8), dtype=np.uint8)
        truth[2:5, 2:5] = 1
        assert seg.optimize_threshold([truth.astype(float)], [truth]) == 0.05

    def test_grid_valued_probabilities(self):
        # probs tile the grid values; truth = (prob > 0.6); best grid point is 0.65
        probs = np.tile(np.round(np.arange(0.0, 1.01, 0.05), 2), (21, 1))
        truth = (probs > 0.6).astype(np.uint8)
        best = seg.optimize_threshold([probs], [truth])
        assert best == pytest.approx(0.65)
        # brute-force over the grid confirms the optimum
        grid = seg.DEFAULT_THRESHOLD_GRID
        scores = [dice(probs >= t, truth) for t in grid]
        assert scores[list(grid).index(best)] == max(scores)

    def test_empty_empty_convention(self):
        zeros = np.zeros((4, 4))
        assert seg.optimize_threshold([zeros], [zeros.astype(np.uint8)]) == 0.05

    def test_matches_exhaustive_grid_evaluation(self):
        rng = np.random.default_rng(5)
        preds = [rng.random((16, 16)) for _ in range(6)]
        truths = [(p > rng.uniform(0.3, 0.7)).astype(np.uint8) for p in preds]
        got = seg.optimize_threshold(preds, truths)
        grid = seg.DEFAULT_THRESHOLD_GRID
        means = [np.mean([dice(p >= t, tr) for p, tr in zip(preds, truths)]) for t in grid]
        best_idx = int(np.argmax(means))  # argmax returns the first (lowest) maximizer
        assert got == pytest.approx(grid[best_idx])

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            seg.optimize_threshold([], [])


class TestPredictPatch:
    def test_rule_based_uniform_patch_zero(self, rule_segmenter):
        p = Patch2D((0, 0), 32, np.zeros((3, 32, 32)))
        out = seg.predict_patch(rule_segmenter, p)
        assert out.shape == (32, 32)
        assert out.sum() == 0

    def test_rule_based_finds_enclosed_cavity(self, rule_segmenter):
        channels = np.full((3, 32, 32), 1.0)
        channels[:, 12:18, 12:18] = -1.0
        out = seg.predict_patch(rule_segmenter, Patch2D((0, 0), 32, channels))
        assert out[13, 13] == 1.0
        assert out[0, 0] == 0.0

    def test_probabilities_bounded(self, small_phantom):
        samples = seg.sample_training_patches(
            [small_phantom.case], [small_phantom.region_mask], seed=0, n_positives=3
        )
        cfg = seg.SegmenterConfig(epochs=1, seed=0)
        model = seg.train_segmenter(samples, cfg)
        for s in samples[:5]:
            out = seg.predict_patch(model, Patch2D((0, 0), 32, s["channels"]))
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_geometry_rejected(self, rule_segmenter):
        with pytest.raises(GeometryMismatchError):
            seg.predict_patch(rule_segmenter, Patch2D((0, 0), 16, np.zeros((3, 16, 16))))

    def test_passthrough_echoes_candidate(self):
        model = seg.SegmenterModel(
            kind="passthrough", config=seg.SegmenterConfig(model="passthrough")
        )
        cand = np.zeros((32, 32), dtype=np.uint8)
        cand[4:8, 4:8] = 1
        out = seg.predict_patch(model, Patch2D((0, 0), 32, np.zeros((3, 32, 32))), candidate=cand)
        assert np.array_equal(out, cand.astype(float))
        with pytest.raises(ValueError):
            seg.predict_patch(model, Patch2D((0, 0), 32, np.zeros((3, 32, 32))))


class TestTrainSegmenter:
    def _dataset(self, phantom, n_pos=6, seed=0):
        return seg.sample_training_patches(
            [phantom.case], [phantom.region_mask], ratio=(0.5, 0.5), seed=seed, n_positives=n_pos
        )

    def test_short_run_reduces_loss(self, small_phantom):
        ds = self._dataset(small_phantom)
        model = seg.train_segmenter(ds, seg.SegmenterConfig(epochs=8, seed=0))
        log = model.training_log
        assert len(log) == 8
        assert log[-1]["train_loss"] < log[0]["train_loss"]

    def test_zero_epochs_untrained_handle(self, small_phantom):
        ds = self._dataset(small_phantom)
        model = seg.train_segmenter(ds, seg.SegmenterConfig(epochs=0, seed=0))
        assert model.metadata["epochs_run"] == 0
        out = seg.predict_patch(model, Patch2D((0, 0), 32, ds[0]["channels"]))
        assert out.shape == (32, 32)

    def test_seeded_determinism(self, small_phantom):
        ds = self._dataset(small_phantom)
        cfg = seg.SegmenterConfig(epochs=3, seed=9)
        a = seg.train_segmenter(ds, cfg)
        b = seg.train_segmenter(ds, cfg)
        assert a.training_log == b.training_log

    def test_single_class_rejected(self, small_phantom):
        ds = [s for s in self._dataset(small_phantom) if s["is_positive"]]
        with pytest.raises(EmptyDatasetError):
            seg.train_segmenter(ds, seg.SegmenterConfig(epochs=1))

    def test_validation_curve_logged(self, small_phantom):
        ds = self._dataset(small_phantom)
        val = self._dataset(small_phantom, n_pos=3, seed=5)
        cfg = seg.SegmenterConfig(epochs=2, seed=0, threshold="optimize")
        model = seg.train_segmenter(ds, cfg, val_dataset=val)
        assert all("val_dice" in e and "val_loss" in e for e in model.training_log)
        assert "optimized_threshold" in model.metadata

    def test_checkpoint_roundtrip(self, small_phantom, tmp_path):
        ds = self._dataset(small_phantom)
        model = seg.train_segmenter(ds, seg.SegmenterConfig(epochs=2, seed=1))
        path = tmp_path / "seg.ckpt"
        seg.save_segmenter(model, path)
        loaded = seg.load_segmenter(path)
        assert loaded.config == model.config
        p = Patch2D((0, 0), 32, ds[0]["channels"])
        assert np.allclose(seg.predict_patch(loaded, p), seg.predict_patch(model, p))


class TestSegmentCandidates:
    def test_empty_candidates_empty_output(self, small_phantom, rule_segmenter):
        case = small_phantom.case
        empty = Volume3D(np.zeros(case.shape, dtype=np.uint8), case.spacing)
        out = seg.segment_candidates(case, empty, small_phantom.region_mask, rule_segmenter)
        assert out.data.sum() == 0

    def test_passthrough_reproduces_candidates(self, small_phantom):
        case = small_phantom.case
        cand = np.zeros(case.shape, dtype=np.uint8)
        cand[40:44, 40:44, 24] = 1
        model = seg.SegmenterModel(
            kind="passthrough", config=seg.SegmenterConfig(model="passthrough", threshold=0.5)
        )
        out = seg.segment_candidates(
            case, Volume3D(cand, case.spacing), None, model
        )
        assert np.array_equal(out.data, cand)

    def test_candidate_outside_subject_mask_skipped(self, small_phantom):
        case = small_phantom.case
        cand = np.zeros(case.shape, dtype=np.uint8)
        cand[40:44, 40:44, 24] = 1
        mask = Volume3D(np.zeros_like(cand), case.spacing)
        model = seg.SegmenterModel(
            kind="passthrough", config=seg.SegmenterConfig(model="passthrough")
        )
        out = seg.segment_candidates(case, Volume3D(cand, case.spacing), mask, model)
        assert out.data.sum() == 0

    def test_or_fusion_permutation_invariant(self, small_phantom):
        case = small_phantom.case
        cand = np.zeros(case.shape, dtype=np.uint8)
        cand[20:23, 20:23, 20] = 1
        cand[26:29, 26:29, 20] = 1  # second component sharing patch territory
        model = seg.SegmenterModel(
            kind="passthrough", config=seg.SegmenterConfig(model="passthrough")
        )
        out = seg.segment_candidates(case, Volume3D(cand, case.spacing), None, model)
        assert np.array_equal(out.data, cand)  # OR of identical passthroughs

    def test_output_within_patch_footprints(self, small_phantom, rule_segmenter):
        case = small_phantom.case
        truth_voxel = np.argwhere(case.truth.data)[0]
        cand = np.zeros(case.shape, dtype=np.uint8)
        x, y, z = truth_voxel
        cand[x, y, z] = 1
        out = seg.segment_candidates(case, Volume3D(cand, case.spacing), None, rule_segmenter)
        # everything outside the single 32x32 patch at that slice must be zero
        footprint = np.zeros(case.shape, dtype=bool)
        r = int(np.clip(x - 16, 0, case.shape[0] - 32))
        c = int(np.clip(y - 16, 0, case.shape[1] - 32))
        footprint[r : r + 32, c : c + 32, z] = True
        assert not out.data[~footprint].any()

    def test_geometry_mismatch_rejected(self, small_phantom, rule_segmenter):
        case = small_phantom.case
        wrong = Volume3D(np.zeros((10, 10, 10), dtype=np.uint8), case.spacing)
        with pytest.raises(GeometryMismatchError):
            seg.segment_candidates(case, wrong, None, rule_segmenter)


def test_resolve_threshold():
    cfg = seg.SegmenterConfig(threshold=0.3)
    model = seg.SegmenterModel(kind="rule_based", config=cfg)
    assert seg.resolve_threshold(model, cfg) == 0.3
    cfg2 = seg.SegmenterConfig(threshold="optimize")
    model2 = seg.SegmenterModel(
        kind="rule_based", config=cfg2, metadata={"optimized_threshold": 0.45}
    )
    assert seg.resolve_threshold(model2, cfg2) == 0.45
    model3 = seg.SegmenterModel(kind="rule_based", config=cfg2)
    assert seg.resolve_threshold(model3, cfg2) == 0.5
