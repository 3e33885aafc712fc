import numpy as np
import pytest

from lacuneseg.errors import GeometryMismatchError
from lacuneseg.patches import (
    Patch2D,
    compute_grid,
    downsample_nn,
    extract_patches,
    reconstruct,
    upsample_nn,
)


class TestComputeGrid:
    def test_even_plane(self):
        g = compute_grid((96, 96), 64, 0.5)
        assert g.stride == 32
        assert sorted({r for r, _ in g.origins}) == [0, 32]
        assert len(g.origins) == 4

    def test_clamped_final_origin(self):
        g = compute_grid((100, 100), 64, 0.5)
        assert sorted({r for r, _ in g.origins}) == [0, 32, 36]

    def test_identity_grid(self):
        g = compute_grid((64, 64), 64, 0.5)
        assert g.origins == [(0, 0)]

    def test_patch_larger_than_plane(self):
        with pytest.raises(GeometryMismatchError):
            compute_grid((48, 96), 64, 0.5)

    def test_bad_overlap(self):
        with pytest.raises(ValueError):
            compute_grid((96, 96), 64, 1.0)

    def test_zero_overlap(self):
        g = compute_grid((128, 128), 64, 0.0)
        assert g.stride == 64
        assert len(g.origins) == 4

    def test_coverage_property(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            rows = int(rng.integers(32, 140))
            cols = int(rng.integers(32, 140))
            patch = int(rng.choice([16, 32]))
            overlap = float(rng.choice([0.0, 0.25, 0.5, 0.75]))
            g = compute_grid((rows, cols), patch, overlap)
            covered = np.zeros((rows, cols), dtype=bool)
            for r, c in g.origins:
                assert 0 <= r <= rows - patch and 0 <= c <= cols - patch
                covered[r : r + patch, c : c + patch] = True
            assert covered.all()
            assert len(set(g.origins)) == len(g.origins)
            assert g.origins == sorted(g.origins)

    def test_determinism(self):
        a = compute_grid((100, 90), 32, 0.5)
        b = compute_grid((100, 90), 32, 0.5)
        assert a.origins == b.origins and a.stride == b.stride


class TestExtract:
    def test_extract_matches_naive_slicing_oracle(self):
        rng = np.random.default_rng(1)
        plane = rng.normal(size=(70, 85))
        g = compute_grid(plane.shape, 32, 0.5)
        patches = extract_patches(plane, g)
        assert len(patches) == len(g.origins)
        for p in patches:
            r, c = p.origin
            assert np.array_equal(p.channels[0], plane[r : r + 32, c : c + 32])

    def test_checkerboard_oracle(self):
        plane = np.indices((64, 64)).sum(axis=0) % 2
        g = compute_grid(plane.shape, 16, 0.5)
        for p in extract_patches(plane, g):
            r, c = p.origin
            assert np.array_equal(p.channels[0], plane[r : r + 16, c : c + 16])

    def test_single_origin_identity(self):
        plane = np.arange(64 * 64, dtype=float).reshape(64, 64)
        g = compute_grid(plane.shape, 64, 0.5)
        (p,) = extract_patches(plane, g)
        assert np.array_equal(p.channels[0], plane)

    def test_mismatched_grid(self):
        g = compute_grid((64, 64), 32, 0.5)
        with pytest.raises(GeometryMismatchError):
            extract_patches(np.zeros((65, 64)), g)


class TestResampling:
    def test_block_structure(self):
        p = Patch2D((0, 0), 2, np.array([[1.0, 2.0], [3.0, 4.0]]))
        up = upsample_nn(p, 4)
        assert up.size == 8
        assert np.array_equal(up.channels[0, :4, :4], np.ones((4, 4)))
        assert up.channels[0, 7, 7] == 4.0

    def test_factor_one_identity(self):
        p = Patch2D((1, 2), 4, np.random.default_rng(2).normal(size=(4, 4)))
        assert np.array_equal(upsample_nn(p, 1).channels, p.channels)
        assert np.array_equal(downsample_nn(p, 1).channels, p.channels)

    def test_inverse_property(self):
        rng = np.random.default_rng(3)
        for k in (1, 2, 4, 8):
            for _ in range(10):
                p = Patch2D((0, 0), 8, rng.normal(size=(3, 8, 8)))
                roundtrip = downsample_nn(upsample_nn(p, k), k)
                assert np.array_equal(roundtrip.channels, p.channels)

    def test_downsample_samples_block_corners(self):
        up = np.zeros((8, 8))
        up[0, 0] = 1.0
        down = downsample_nn(Patch2D((0, 0), 8, up), 4)
        assert down.channels[0, 0, 0] == 1.0
        assert down.channels.sum() == 1.0

    def test_binarize_before_sampling(self):
        soft = np.full((8, 8), 0.7)
        down = downsample_nn(Patch2D((0, 0), 8, soft), 4, binarize=True)
        assert set(np.unique(down.channels)) == {1}

    def test_non_divisible_size(self):
        with pytest.raises(GeometryMismatchError):
            downsample_nn(Patch2D((0, 0), 6, np.zeros((6, 6))), 4)

    def test_mask_downsample_source_pixels(self):
        rng = np.random.default_rng(4)
        mask = (rng.random((256, 256)) > 0.8).astype(float)
        down = downsample_nn(Patch2D((0, 0), 256, mask), 4, binarize=True)
        # exhaustive index check: output (i, j) mirrors input (4i, 4j)
        for i in range(64):
            for j in range(64):
                assert down.channels[0, i, j] == (mask[4 * i, 4 * j] >= 0.5)


class TestReconstruct:
    def test_roundtrip_exact_unclamped(self):
        rng = np.random.default_rng(5)
        plane = rng.normal(size=(96, 128))
        g = compute_grid(plane.shape, 32, 0.5)
        out = reconstruct(extract_patches(plane, g), g, fusion="mean")
        assert np.array_equal(out, plane)

    def test_roundtrip_exact_clamped(self):
        rng = np.random.default_rng(6)
        plane = rng.normal(size=(100, 70))  # clamped final origins, coverage count 3
        g = compute_grid(plane.shape, 32, 0.5)
        out = reconstruct(extract_patches(plane, g), g, fusion="mean")
        assert np.array_equal(out, plane)

    def test_overlap_max_fusion(self):
        g = compute_grid((48, 32), 32, 0.5)
        zeros = Patch2D((0, 0), 32, np.zeros((32, 32)))
        ones = Patch2D((16, 0), 32, np.ones((32, 32)))
        out = reconstruct([zeros, ones], g, fusion="max")
        assert out[20, 5] == 1.0  # overlap region takes the max

    def test_overlap_mean_fusion(self):
        g = compute_grid((48, 32), 32, 0.5)
        zeros = Patch2D((0, 0), 32, np.zeros((32, 32)))
        ones = Patch2D((16, 0), 32, np.ones((32, 32)))
        out = reconstruct([zeros, ones], g, fusion="mean")
        assert out[20, 5] == 0.5
        assert out[0, 0] == 0.0 and out[40, 0] == 1.0

    def test_three_channel_roundtrip(self):
        rng = np.random.default_rng(7)
        planes = rng.normal(size=(3, 64, 96))
        g = compute_grid((64, 96), 32, 0.5)
        patches = [
            Patch2D((r, c), 32, planes[:, r : r + 32, c : c + 32]) for r, c in g.origins
        ]
        out = reconstruct(patches, g, fusion="mean")
        assert np.array_equal(out, planes)

    def test_empty_patch_list(self):
        g = compute_grid((32, 32), 32, 0.5)
        with pytest.raises(ValueError):
            reconstruct([], g)

    def test_origin_not_in_grid(self):
        g = compute_grid((64, 64), 32, 0.5)
        p = Patch2D((1, 1), 32, np.zeros((32, 32)))
        with pytest.raises(GeometryMismatchError):
            reconstruct([p], g)

    def test_inconsistent_sizes(self):
        g = compute_grid((64, 64), 32, 0.5)
        a = Patch2D((0, 0), 32, np.zeros((32, 32)))
        b = Patch2D((0, 32), 16, np.zeros((16, 16)))
        with pytest.raises(GeometryMismatchError):
            reconstruct([a, b], g)
