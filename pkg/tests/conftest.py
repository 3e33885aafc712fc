import numpy as np
import pytest

from lacuneseg.detector import DetectorConfig, DetectorModel
from lacuneseg.phantom import PhantomSpec, generate_phantom
from lacuneseg.prevalence import dilate_mm
from lacuneseg.segmenter import SegmenterConfig, SegmenterModel
from lacuneseg.volume import MultiModalCase, Volume3D


def subject_mask_for(phantom, csf_margin_mm=2.0):
    """Prevalence region with the CSF blob excluded, as the map construction does."""
    csf = dilate_mm(phantom.csf_mask, csf_margin_mm).data.astype(bool)
    region = phantom.region_mask.data.astype(bool)
    return Volume3D((region & ~csf).astype(np.uint8), phantom.region_mask.spacing)


def make_volume(shape=(16, 16, 8), spacing=(1.0, 1.0, 1.0), seed=0, offset=0.0, scale=1.0):
    rng = np.random.default_rng(seed)
    return Volume3D(offset + scale * rng.normal(size=shape), spacing)


def make_case(shape=(32, 32, 12), spacing=(1.0, 1.0, 1.0), seed=0, with_truth=True):
    """Random-noise case with a small truth blob in the middle."""
    rng = np.random.default_rng(seed)
    mods = [Volume3D(rng.normal(1.0, 0.2, size=shape), spacing) for _ in range(3)]
    truth = None
    if with_truth:
        t = np.zeros(shape, dtype=np.uint8)
        cx, cy, cz = (s // 2 for s in shape)
        t[cx - 1 : cx + 2, cy - 1 : cy + 2, cz] = 1
        truth = Volume3D(t, spacing)
    return MultiModalCase("case_%03d" % seed, mods[0], mods[1], mods[2], truth)


@pytest.fixture(scope="session")
def small_phantom():
    """One mid-size phantom shared by read-only tests."""
    spec = PhantomSpec(
        shape=(96, 96, 48),
        n_lacunes=2,
        n_decoys_outside_region=1,
        diameter_range_mm=(4.0, 8.0),
        seed=11,
    )
    return generate_phantom(spec)


@pytest.fixture(scope="session")
def rule_detector():
    return DetectorModel(kind="rule_based", config=DetectorConfig(model="rule_based"))


@pytest.fixture(scope="session")
def rule_segmenter():
    return SegmenterModel(kind="rule_based", config=SegmenterConfig(model="rule_based"))
