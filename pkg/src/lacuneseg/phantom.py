"""Synthetic multi-modal phantoms with planted lacunes and ground truth.

Each phantom is an ellipsoidal "brain" of noisy tissue inside a zero
background, with an interior ellipsoidal prevalence region and a small central
CSF blob. Lacunes are ellipsoidal cavities (random axis ratios 0.5-1.0)
rendered hypointense on T1 and FLAIR with a hyperintense FLAIR rim and bright
on T2; decoys are rendered identically but planted well outside the prevalence
region so that prior masking must remove them. Intensity constants are
generator parameters tuned for the rule-based reference detector, not claims
about MR physics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import MultiModalCase, Volume3D

# tissue means per modality and lesion contrast factors
T1_TISSUE = 1.0
T2_TISSUE = 0.85
FLAIR_TISSUE = 0.9
CORE_FACTOR = 0.25  # T1/FLAIR core suppression
T2_CORE_FACTOR = 1.5  # fluid is bright on T2
RIM_FACTOR = 1.6  # FLAIR rim boost
BRAIN_SEMIAXES = 0.42  # fraction of volume half-extent
REGION_SEMIAXES = 0.35  # fraction of brain semi-axes
CSF_SEMIAXES_MM = (7.0, 5.0, 5.0)


@dataclass
class PhantomSpec:
    shape: tuple = (128, 128, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    n_lacunes: int = 3
    n_decoys_outside_region: int = 2
    diameter_range_mm: tuple = (3.0, 15.0)
    rim_thickness: int = 1  # voxels
    noise_level: float = 0.04
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.diameter_range_mm
        if not 0 < lo <= hi:
            raise ValueError(f"invalid diameter range {self.diameter_range_mm}")
        if self.n_lacunes < 0 or self.n_decoys_outside_region < 0:
            raise ValueError("lesion counts must be non-negative")


@dataclass
class Phantom:
    case: MultiModalCase  # truth = in-region lacune cores only
    region_mask: Volume3D  # synthetic prevalence region (subject space)
    csf_mask: Volume3D
    decoy_mask: Volume3D  # decoy cores, all outside the region
    manifest: list = field(default_factory=list)  # per component: centroid, diameter, flag


def _ellipsoid_mask(shape, center, semiaxes_vox):
    grids = np.ogrid[[slice(0, n) for n in shape]]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, a in zip(grids, center, semiaxes_vox):
        acc = acc + ((g - c) / a) ** 2
    return acc <= 1.0


def _smooth_noise(rng, shape, sigma_vox=3.0):
    noise = rng.standard_normal(shape)
    noise = ndimage.gaussian_filter(noise, sigma=sigma_vox)
    std = noise.std()
    return noise / std if std > 0 else noise


def _sample_lesion_axes(rng, diameter_mm):
    # random axis ratios in [0.5, 1], rescaled so the equivalent diameter
    # (2 * cbrt(abc)) matches the drawn diameter
    r = diameter_mm / 2.0
    ratios = rng.uniform(0.5, 1.0, size=3)
    axes = r * ratios
    scale = r / np.prod(axes) ** (1.0 / 3.0)
    return axes * scale


def generate_phantom(spec: PhantomSpec) -> Phantom:
    """Render one seeded phantom; identical specs give identical volumes."""
    rng = np.random.default_rng(spec.seed)
    shape = tuple(int(n) for n in spec.shape)
    spacing = tuple(float(s) for s in spec.spacing)
    center = np.array([(n - 1) / 2.0 for n in shape])
    half_extent = np.array([n / 2.0 for n in shape])

    brain_ax = half_extent * BRAIN_SEMIAXES * 2.0  # in voxels
    brain = _ellipsoid_mask(shape, center, brain_ax)
    region_ax = brain_ax * REGION_SEMIAXES  # fraction of the brain's semi-axes
    region = _ellipsoid_mask(shape, center, region_ax)
    # CSF blob stays well inside the region even for small phantoms
    csf_ax = np.minimum(np.array(CSF_SEMIAXES_MM) / np.array(spacing), region_ax * 0.4)
    csf = _ellipsoid_mask(shape, center, csf_ax) & brain

    spacing_arr = np.array(spacing)
    # physical distance to the region, for decoy clearance
    dist_to_region = ndimage.distance_transform_edt(~region, sampling=spacing_arr)
    dist_to_csf = ndimage.distance_transform_edt(~csf, sampling=spacing_arr)
    dist_to_brain_edge = ndimage.distance_transform_edt(brain, sampling=spacing_arr)

    placements = []  # (center_vox, axes_mm, radius_mm, is_decoy)

    rim_mm = spec.rim_thickness * float(spacing_arr.max())
    region_pool = np.argwhere(region)
    decoy_pool = np.argwhere(brain & ~region)

    def _place(count, is_decoy):
        pool = decoy_pool if is_decoy else region_pool
        if pool.shape[0] == 0:
            raise ValueError("phantom geometry leaves no room for lesion centers")
        for _ in range(count):
            placed = False
            for _attempt in range(2000):
                d = rng.uniform(*spec.diameter_range_mm)
                axes_mm = _sample_lesion_axes(rng, d)
                r = float(axes_mm.max())
                idx = tuple(pool[int(rng.integers(0, pool.shape[0]))])
                if is_decoy:
                    # whole core + rim must stay clear of the (dilated) region
                    if dist_to_region[idx] < r + rim_mm + 8.0:
                        continue
                    if dist_to_brain_edge[idx] < r + rim_mm + 2.0:
                        continue
                else:
                    if dist_to_brain_edge[idx] < r + rim_mm + 2.0:
                        continue
                    if dist_to_csf[idx] < r + rim_mm + 1.0:
                        continue
                ok = True
                for prev_center, prev_axes, prev_r, _ in placements:
                    gap = np.linalg.norm((np.array(idx) - prev_center) * spacing_arr)
                    if gap < r + prev_r + 2 * rim_mm + 2.0:
                        ok = False
                        break
                if ok:
                    placements.append((np.array(idx), axes_mm, r, is_decoy))
                    placed = True
                    break
            if not placed:
                raise ValueError(
                    "could not place a lesion; the spec does not fit the phantom geometry"
                )

    _place(spec.n_lacunes, is_decoy=False)
    _place(spec.n_decoys_outside_region, is_decoy=True)

    t1 = np.zeros(shape, dtype=np.float64)
    t2 = np.zeros(shape, dtype=np.float64)
    flair = np.zeros(shape, dtype=np.float64)
    for vol, tissue in ((t1, T1_TISSUE), (t2, T2_TISSUE), (flair, FLAIR_TISSUE)):
        texture = 1.0 + spec.noise_level * _smooth_noise(rng, shape)
        vol[brain] = (tissue * texture)[brain]
    # CSF is dark on T1/FLAIR, bright on T2
    t1[csf] *= CORE_FACTOR
    flair[csf] *= CORE_FACTOR
    t2[csf] *= T2_CORE_FACTOR

    truth = np.zeros(shape, dtype=np.uint8)
    decoys = np.zeros(shape, dtype=np.uint8)
    manifest = []
    for center_vox, axes_mm, _r, is_decoy in placements:
        core = _ellipsoid_mask(shape, center_vox, axes_mm / spacing_arr) & brain
        rim_vox = spec.rim_thickness
        rim = (
            ndimage.binary_dilation(core, iterations=rim_vox) & ~core & brain
            if rim_vox > 0
            else np.zeros(shape, dtype=bool)
        )
        t1[core] = T1_TISSUE * CORE_FACTOR
        flair[core] = FLAIR_TISSUE * CORE_FACTOR
        t2[core] = T2_TISSUE * T2_CORE_FACTOR
        flair[rim] = FLAIR_TISSUE * RIM_FACTOR
        if is_decoy:
            decoys[core] = 1
        else:
            truth[core] = 1
        volume_mm3 = float(core.sum()) * float(np.prod(spacing_arr))
        manifest.append(
            {
                "centroid_vox": [float(x) for x in center_vox],
                "equivalent_diameter_mm": float(2.0 * (3.0 * volume_mm3 / (4.0 * np.pi)) ** (1.0 / 3.0)),
                "drawn_axes_mm": [float(a) for a in axes_mm],
                "is_decoy": bool(is_decoy),
            }
        )

    case = MultiModalCase(
        case_id=f"phantom_{spec.seed:04d}",
        t1=Volume3D(t1.astype(np.float32), spacing),
        t2=Volume3D(t2.astype(np.float32), spacing),
        flair=Volume3D(flair.astype(np.float32), spacing),
        truth=Volume3D(truth, spacing),
    )
    return Phantom(
        case=case,
        region_mask=Volume3D(region.astype(np.uint8), spacing),
        csf_mask=Volume3D(csf.astype(np.uint8), spacing),
        decoy_mask=Volume3D(decoys, spacing),
        manifest=manifest,
    )
