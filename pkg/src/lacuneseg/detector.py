"""Stage 1: candidate detection on upsampled 256x256 three-channel patches.

Two interchangeable model kinds sit behind the same DetectorModel handle: a
torchvision Mask R-CNN (ResNet50-FPN backbone by default, or a small
single-feature-map backbone for desk-scale training), and a deterministic
rule-based reference detector used as a test oracle and for pipeline runs
without trained weights. The rule-based detector finds dark cavities fully
enclosed by bright tissue (holes of the thresholded foreground, agreeing on T1
and FLAIR) and gates them by equivalent diameter in mm.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    ConfigError,
    EmptyDatasetError,
    GeometryMismatchError,
    TrainingDivergedError,
)
from .patches import Patch2D, compute_grid, extract_patches, upsample_nn
from .volume import Volume3D, normalize_case, slice_stack

CONNECTIVITY_2D_8 = np.ones((3, 3), dtype=bool)


@dataclass
class RuleParams:
    """Parameters of the rule-based reference detector."""

    fg_threshold: float = 0.5  # z-score units: tissue above, cavity/background below
    min_diameter_mm: float = 3.0
    max_diameter_mm: float = 15.0
    in_plane_spacing_mm: tuple = (1.0, 1.0)
    min_area_px: int = 8  # speck filter, in upsampled pixels
    require_flair_agreement: bool = True


@dataclass
class DetectorConfig:
    anchor_sizes: tuple = (4, 8, 16, 32, 64)
    aspect_ratios: tuple = (0.02, 0.25, 1.0, 2.0, 2.75)
    batch_size: int = 6
    epochs: int = 20
    score_threshold: float = 0.5
    hflip_probability: float = 0.5
    upsample_factor: int = 4
    seed: int = 0
    patch_size: int = 64  # grid patch size before upsampling
    overlap: float = 0.5
    model: str = "maskrcnn"  # "maskrcnn" | "rule_based"
    backbone: str = "resnet50"  # "resnet50" | "tiny"
    learning_rate: float = 0.005
    momentum: float = 0.9
    rule_params: RuleParams = field(default_factory=RuleParams)

    def __post_init__(self):
        if isinstance(self.rule_params, dict):
            self.rule_params = RuleParams(**self.rule_params)
        self.anchor_sizes = tuple(self.anchor_sizes)
        self.aspect_ratios = tuple(self.aspect_ratios)
        if any(s <= 0 for s in self.anchor_sizes) or list(self.anchor_sizes) != sorted(
            self.anchor_sizes
        ):
            raise ConfigError(f"anchor sizes must be positive ascending: {self.anchor_sizes}")
        if any(r <= 0 for r in self.aspect_ratios):
            raise ConfigError(f"aspect ratios must be positive: {self.aspect_ratios}")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError(f"score_threshold must be in [0, 1]: {self.score_threshold}")
        if self.upsample_factor < 1:
            raise ConfigError("upsample_factor must be >= 1")

    @property
    def input_size(self):
        return self.patch_size * self.upsample_factor


@dataclass
class Detection:
    """One stage-1 candidate in upsampled patch pixel coordinates.

    bbox is half-open (row_min, col_min, row_max, col_max); the mask is
    patch-sized and nonzero only inside the bbox (up to 1 px dilation).
    """

    bbox: tuple
    mask: np.ndarray = field(repr=False)
    score: float
    patch_origin: tuple = (0, 0)
    slice_index: int = 0

    def __post_init__(self):
        r0, c0, r1, c1 = self.bbox
        h, w = self.mask.shape
        if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
            raise ValueError(f"bbox {self.bbox} invalid for mask {self.mask.shape}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class DetectorModel:
    """Opaque trained-model handle: config echo plus training metadata."""

    kind: str  # "maskrcnn" | "rule_based"
    config: DetectorConfig
    metadata: dict = field(default_factory=dict)
    module: object = None  # torch.nn.Module for the learned kind

    @property
    def rule_params(self) -> RuleParams:
        return self.config.rule_params


def build_training_set(cases, config: DetectorConfig = None):
    """Detection samples from every axial slice that contains truth voxels.

    Each sample is one 64x64 grid patch (50% overlap) upsampled x4, with
    per-instance boxes and masks from the 2D 8-connected truth components
    clipped to the patch. Cases are z-score normalized per modality first.
    """
    config = config or DetectorConfig()
    samples = []
    for case in cases:
        if case.truth is None:
            raise EmptyDatasetError(f"{case.case_id}: case has no truth mask")
        norm = normalize_case(case)
        truth = case.truth.data
        grid = compute_grid(case.shape[:2], config.patch_size, config.overlap)
        for z in range(case.shape[2]):
            t_slice = truth[:, :, z]
            if not t_slice.any():
                continue
            labels, n_inst = ndimage.label(t_slice, structure=CONNECTIVITY_2D_8)
            stack = slice_stack(norm, z)
            for patch in extract_patches(stack, grid):
                up = upsample_nn(patch, config.upsample_factor)
                r, c = patch.origin
                label_patch = labels[r : r + config.patch_size, c : c + config.patch_size]
                boxes, masks = [], []
                for inst in range(1, n_inst + 1):
                    inst_mask = label_patch == inst
                    if not inst_mask.any():
                        continue
                    up_mask = np.repeat(
                        np.repeat(inst_mask, config.upsample_factor, axis=0),
                        config.upsample_factor,
                        axis=1,
                    )
                    rows = np.nonzero(up_mask.any(axis=1))[0]
                    cols = np.nonzero(up_mask.any(axis=0))[0]
                    boxes.append(
                        (int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)
                    )
                    masks.append(up_mask.astype(np.uint8))
                samples.append(
                    {
                        "image": up.channels.astype(np.float32),
                        "boxes": boxes,
                        "masks": masks,
                        "case_id": case.case_id,
                        "slice_index": z,
                        "patch_origin": patch.origin,
                    }
                )
    if not any(s["boxes"] for s in samples):
        raise EmptyDatasetError("no slices with lacunes in any case")
    return samples


def _build_maskrcnn(config: DetectorConfig):
    from torchvision.models.detection import MaskRCNN
    from torchvision.models.detection.anchor_utils import AnchorGenerator
    from torchvision.models.detection.backbone_utils import resnet_fpn_backbone
    from torchvision.ops import MultiScaleRoIAlign

    size = config.input_size
    common = dict(
        num_classes=2,
        min_size=size,
        max_size=size,
        image_mean=[0.0, 0.0, 0.0],
        image_std=[1.0, 1.0, 1.0],
    )
    if config.backbone == "resnet50":
        backbone = resnet_fpn_backbone(backbone_name="resnet50", weights=None)
        n_maps = 5  # four FPN levels plus pool
        if len(config.anchor_sizes) != n_maps:
            raise ConfigError(
                f"resnet50 FPN expects {n_maps} anchor sizes (one per level), "
                f"got {config.anchor_sizes}"
            )
        anchors = AnchorGenerator(
            sizes=tuple((s,) for s in config.anchor_sizes),
            aspect_ratios=(tuple(config.aspect_ratios),) * n_maps,
        )
        return MaskRCNN(backbone, rpn_anchor_generator=anchors, **common)
    if config.backbone == "tiny":
        import torch.nn as nn

        class TinyBackbone(nn.Module):
            def __init__(self, out_channels=64):
                super().__init__()
                self.body = nn.Sequential(
                    nn.Conv2d(3, 32, 3, stride=2, padding=1),
                    nn.BatchNorm2d(32),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(32, 64, 3, stride=2, padding=1),
                    nn.BatchNorm2d(64),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(64, out_channels, 3, padding=1),
                    nn.ReLU(inplace=True),
                )
                self.out_channels = out_channels

            def forward(self, x):
                return self.body(x)

        anchors = AnchorGenerator(
            sizes=(tuple(config.anchor_sizes),),
            aspect_ratios=(tuple(config.aspect_ratios),),
        )
        return MaskRCNN(
            TinyBackbone(),
            rpn_anchor_generator=anchors,
            box_roi_pool=MultiScaleRoIAlign(["0"], output_size=7, sampling_ratio=2),
            mask_roi_pool=MultiScaleRoIAlign(["0"], output_size=14, sampling_ratio=2),
            **common,
        )
    raise ConfigError(f"unknown backbone {config.backbone!r}")


def _to_torch_target(sample, size):
    import torch

    boxes = sample["boxes"]
    if boxes:
        xyxy = torch.tensor(
            [[c0, r0, c1, r1] for r0, c0, r1, c1 in boxes], dtype=torch.float32
        )
        masks = torch.tensor(np.stack(sample["masks"]), dtype=torch.uint8)
    else:
        xyxy = torch.zeros((0, 4), dtype=torch.float32)
        masks = torch.zeros((0, size, size), dtype=torch.uint8)
    labels = torch.ones((xyxy.shape[0],), dtype=torch.int64)
    return {"boxes": xyxy, "labels": labels, "masks": masks}


def _hflip_sample(sample, size):
    flipped = {
        "image": sample["image"][:, :, ::-1].copy(),
        "masks": [m[:, ::-1].copy() for m in sample["masks"]],
        "boxes": [(r0, size - c1, r1, size - c0) for r0, c0, r1, c1 in sample["boxes"]],
    }
    return {**sample, **flipped}


def train_detector(dataset, config: DetectorConfig) -> DetectorModel:
    """Train (or instantiate) the stage-1 model; seeded runs reproduce logs."""
    if config.model == "rule_based":
        return DetectorModel(
            kind="rule_based",
            config=config,
            metadata={"epochs_run": 0, "final_loss": None, "loss_log": []},
        )
    if not dataset:
        raise EmptyDatasetError("empty detection dataset")

    import torch

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    size = config.input_size
    model = _build_maskrcnn(config)
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(
        params, lr=config.learning_rate, momentum=config.momentum, weight_decay=5e-4
    )

    loss_log = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            images, targets = [], []
            for i in batch_idx:
                sample = dataset[int(i)]
                if rng.random() < config.hflip_probability:
                    sample = _hflip_sample(sample, size)
                images.append(torch.from_numpy(sample["image"].copy()))
                targets.append(_to_torch_target(sample, size))
            losses = model(images, targets)
            total = sum(losses.values())
            _check_finite_loss(total, epoch, losses)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            epoch_losses.append(float(total.detach()))
        loss_log.append({"epoch": epoch, "loss": float(np.mean(epoch_losses))})
    model.eval()
    return DetectorModel(
        kind="maskrcnn",
        config=config,
        metadata={
            "epochs_run": config.epochs,
            "final_loss": loss_log[-1]["loss"] if loss_log else None,
            "loss_log": loss_log,
        },
        module=model,
    )


def _check_finite_loss(total, epoch, parts):
    value = float(total.detach()) if hasattr(total, "detach") else float(total)
    if not np.isfinite(value):
        detail = {k: float(v.detach()) for k, v in parts.items()} if parts else {}
        raise TrainingDivergedError(
            f"non-finite loss {value} at epoch {epoch}; parts: {detail}"
        )


def _check_patch_geometry(patch: Patch2D, expected_size):
    if patch.channels.shape != (3, expected_size, expected_size):
        raise GeometryMismatchError(
            f"expected (3, {expected_size}, {expected_size}) patch, "
            f"got {patch.channels.shape}"
        )


def rule_based_detect(patch256: Patch2D, params: RuleParams, upsample_factor=4):
    """Reference detector: dark cavities enclosed by tissue, size-gated.

    Foreground is thresholded per channel; a candidate is a hole of the T1
    foreground (also of the FLAIR foreground when agreement is required).
    Components are filtered to equivalent diameters within the lacune range,
    measured in mm at original resolution. Score is one minus the min-max
    normalized mean FLAIR intensity of the core.
    """
    t1 = patch256.channels[0]
    flair = patch256.channels[2]
    fg_t1 = t1 > params.fg_threshold
    cand = ndimage.binary_fill_holes(fg_t1) & ~fg_t1
    if params.require_flair_agreement:
        fg_fl = flair > params.fg_threshold
        cand &= ndimage.binary_fill_holes(fg_fl) & ~fg_fl
    if not cand.any():
        return []

    fl_min, fl_max = float(flair.min()), float(flair.max())
    fl_range = fl_max - fl_min
    mm_per_px = float(np.sqrt(np.prod(params.in_plane_spacing_mm))) / upsample_factor

    labels, _ = ndimage.label(cand, structure=CONNECTIVITY_2D_8)
    detections = []
    for obj_idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        comp = labels[sl] == obj_idx
        area = int(comp.sum())
        if area < params.min_area_px:
            continue
        diameter_mm = 2.0 * np.sqrt(area / np.pi) * mm_per_px
        if not params.min_diameter_mm <= diameter_mm <= params.max_diameter_mm:
            continue
        mask = np.zeros(t1.shape, dtype=np.uint8)
        mask[sl][comp] = 1
        if fl_range > 0:
            core_norm = (flair[sl][comp].mean() - fl_min) / fl_range
        else:
            core_norm = 1.0
        score = float(np.clip(1.0 - core_norm, 0.0, 1.0))
        bbox = (sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)
        detections.append(
            Detection(
                bbox=bbox,
                mask=mask,
                score=score,
                patch_origin=patch256.origin,
                slice_index=patch256.slice_index,
            )
        )
    detections.sort(key=lambda d: -d.score)
    return detections


def detect(model: DetectorModel, patch256: Patch2D, in_plane_spacing=None):
    """Detections with score >= config.score_threshold, sorted descending."""
    config = model.config
    _check_patch_geometry(patch256, config.input_size)
    if model.kind == "rule_based":
        params = model.rule_params
        if in_plane_spacing is not None:
            params = replace(params, in_plane_spacing_mm=tuple(in_plane_spacing))
        dets = rule_based_detect(patch256, params, config.upsample_factor)
    elif model.kind == "maskrcnn":
        dets = _maskrcnn_detect(model, patch256)
    else:
        raise ConfigError(f"unknown model kind {model.kind!r}")
    kept = [d for d in dets if d.score >= config.score_threshold]
    kept.sort(key=lambda d: -d.score)
    return kept


def _maskrcnn_detect(model: DetectorModel, patch256: Patch2D):
    import torch

    module = model.module
    module.eval()
    size = model.config.input_size
    with torch.no_grad():
        out = module([torch.from_numpy(patch256.channels.astype(np.float32))])[0]
    detections = []
    for box, score, mask in zip(out["boxes"], out["scores"], out["masks"]):
        x0, y0, x1, y1 = [float(v) for v in box]
        r0 = int(np.clip(np.floor(y0), 0, size - 1))
        c0 = int(np.clip(np.floor(x0), 0, size - 1))
        r1 = int(np.clip(np.ceil(y1), r0 + 1, size))
        c1 = int(np.clip(np.ceil(x1), c0 + 1, size))
        m = (mask[0].numpy() >= 0.5).astype(np.uint8)
        # enforce the mask-in-dilated-bbox invariant
        keep = np.zeros_like(m)
        kr0, kc0 = max(0, r0 - 1), max(0, c0 - 1)
        kr1, kc1 = min(size, r1 + 1), min(size, c1 + 1)
        keep[kr0:kr1, kc0:kc1] = m[kr0:kr1, kc0:kc1]
        if not keep.any():
            continue
        detections.append(
            Detection(
                bbox=(r0, c0, r1, c1),
                mask=keep,
                score=float(score),
                patch_origin=patch256.origin,
                slice_index=patch256.slice_index,
            )
        )
    return detections


def candidates_from_detections(
    detections, volume_shape, spacing, upsample_factor, grid=None
) -> Volume3D:
    """OR-fuse downsampled detection masks into a binary 3D candidate map."""
    nx, ny, nz = volume_shape
    out = np.zeros(volume_shape, dtype=np.uint8)
    f = int(upsample_factor)
    for det in detections:
        down = (det.mask >= 0.5).astype(np.uint8)[::f, ::f]
        ps = down.shape[0]
        r, c = det.patch_origin
        z = det.slice_index
        if not (0 <= r and r + ps <= nx and 0 <= c and c + ps <= ny and 0 <= z < nz):
            raise GeometryMismatchError(
                f"detection at origin {(r, c)} slice {z} falls outside volume {volume_shape}"
            )
        if grid is not None and tuple(det.patch_origin) not in set(grid.origins):
            raise GeometryMismatchError(f"origin {det.patch_origin} not in grid")
        out[r : r + ps, c : c + ps, z] |= down
    return Volume3D(out, spacing)


def save_detector(model: DetectorModel, path):
    """Checkpoint + sidecar metadata JSON (config echo and training log)."""
    import torch

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": model.kind,
        "config": asdict(model.config),
        "metadata": model.metadata,
        "state_dict": model.module.state_dict() if model.module is not None else None,
    }
    torch.save(payload, path)
    sidecar = {"kind": model.kind, "config": asdict(model.config), "metadata": model.metadata}
    Path(str(path) + ".meta.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_detector(path) -> DetectorModel:
    import torch

    payload = torch.load(path, map_location="cpu", weights_only=True)
    config = DetectorConfig(**payload["config"])
    module = None
    if payload["state_dict"] is not None:
        module = _build_maskrcnn(config)
        module.load_state_dict(payload["state_dict"])
        module.eval()
    return DetectorModel(
        kind=payload["kind"], config=config, metadata=payload["metadata"], module=module
    )
