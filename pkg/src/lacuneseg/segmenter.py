"""Stage 2: patch segmentation at the locations stage 1 proposed.

Training patches are sampled at a configurable lacune/background ratio:
positives centered on truth voxels, background centered on prevalence-mask
voxels without truth. The model is a small encoder-decoder with skip
connections producing 32x32 probabilities; a rule-based fallback (thresholded
cavities, hole-filled) and a passthrough double keep the pipeline testable
without trained weights.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    ConfigError,
    EmptyDatasetError,
    GeometryMismatchError,
    TrainingDivergedError,
)
from .metrics import dice
from .patches import Patch2D
from .volume import MultiModalCase, Volume3D, normalize_case

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)
DEFAULT_THRESHOLD_GRID = tuple(np.round(np.arange(0.05, 0.96, 0.05), 2))


@dataclass
class SegmenterConfig:
    patch_size: int = 32
    overlap: float = 0.5
    lacune_background_ratio: tuple = (0.10, 0.90)
    epochs: int = 30
    threshold: object = 0.5  # float in [0,1], or "optimize"
    seed: int = 0
    model: str = "unet"  # "unet" | "rule_based" | "passthrough"
    base_channels: int = 16
    learning_rate: float = 3e-3
    batch_size: int = 32
    loss: str = "dice"  # "dice" | "bce"
    jitter: int = 0  # voxels of in-plane jitter for positive patch centers
    rule_fg_threshold: float = 0.5

    def __post_init__(self):
        self.lacune_background_ratio = tuple(float(r) for r in self.lacune_background_ratio)
        pos, bg = self.lacune_background_ratio
        if pos <= 0 or bg <= 0 or abs(pos + bg - 1.0) > 1e-9:
            raise ConfigError(
                f"ratio components must be positive and sum to 1: {self.lacune_background_ratio}"
            )
        if self.patch_size % 2 != 0:
            raise ConfigError(f"patch_size must be even: {self.patch_size}")
        if isinstance(self.threshold, str):
            if self.threshold != "optimize":
                raise ConfigError(f"threshold must be a float or 'optimize': {self.threshold}")
        elif not 0.0 <= float(self.threshold) <= 1.0:
            raise ConfigError(f"threshold outside [0, 1]: {self.threshold}")
        if self.loss not in ("dice", "bce"):
            raise ConfigError(f"unknown loss {self.loss!r}")


@dataclass
class SegmenterModel:
    kind: str  # "unet" | "rule_based" | "passthrough"
    config: SegmenterConfig
    metadata: dict = field(default_factory=dict)  # incl. per-epoch training log
    module: object = None

    @property
    def training_log(self):
        return self.metadata.get("training_log", [])


def _patch_window(center_rc, patch_size, plane_shape):
    half = patch_size // 2
    r = int(np.clip(center_rc[0] - half, 0, plane_shape[0] - patch_size))
    c = int(np.clip(center_rc[1] - half, 0, plane_shape[1] - patch_size))
    return r, c


def sample_training_patches(
    cases, subject_masks, ratio=(0.10, 0.90), seed=0, patch_size=32, n_positives=None, jitter=0
):
    """Seeded patch sampling at the given lacune/background ratio.

    Positive patches are centered on truth voxels; background patches on
    prevalence-mask voxels without truth. Realized counts match the ratio
    within one patch. Cases are normalized per modality before extraction.
    """
    if len(cases) != len(subject_masks):
        raise GeometryMismatchError("one subject mask per case is required")
    rng = np.random.default_rng(seed)
    pos_centers, bg_centers = [], []
    normalized = []
    for idx, (case, mask) in enumerate(zip(cases, subject_masks)):
        if case.truth is None:
            raise EmptyDatasetError(f"{case.case_id}: case has no truth mask")
        if not mask.same_grid_as(case.t1):
            raise GeometryMismatchError(f"{case.case_id}: prevalence mask grid differs")
        normalized.append(normalize_case(case))
        truth = case.truth.data.astype(bool)
        prior = mask.data.astype(bool)
        for xyz in np.argwhere(truth):
            pos_centers.append((idx, *xyz))
        for xyz in np.argwhere(prior & ~truth):
            bg_centers.append((idx, *xyz))
    if not pos_centers:
        raise EmptyDatasetError("no positive (truth) voxels anywhere")
    if not bg_centers:
        raise EmptyDatasetError("prevalence mask is empty outside truth")

    if n_positives is not None and n_positives < len(pos_centers):
        chosen = rng.choice(len(pos_centers), size=n_positives, replace=False)
        pos_centers = [pos_centers[i] for i in chosen]
    pos_frac, bg_frac = ratio
    n_bg = int(round(len(pos_centers) * bg_frac / pos_frac))
    if n_bg > len(bg_centers):
        raise EmptyDatasetError(
            f"need {n_bg} background centers but only {len(bg_centers)} available"
        )
    chosen_bg = rng.choice(len(bg_centers), size=n_bg, replace=False)

    samples = []
    for is_positive, centers in ((True, pos_centers), (False, [bg_centers[i] for i in chosen_bg])):
        for idx, x, y, z in centers:
            if is_positive and jitter > 0:
                x = int(x + rng.integers(-jitter, jitter + 1))
                y = int(y + rng.integers(-jitter, jitter + 1))
            case = normalized[idx]
            plane_shape = case.shape[:2]
            r, c = _patch_window((x, y), patch_size, plane_shape)
            channels = np.stack([m.data[r : r + patch_size, c : c + patch_size, z] for m in case.modalities()])
            truth_patch = cases[idx].truth.data[r : r + patch_size, c : c + patch_size, z]
            samples.append(
                {
                    "channels": channels.astype(np.float32),
                    "truth": truth_patch.astype(np.uint8),
                    "case_id": case.case_id,
                    "center": (int(x), int(y), int(z)),
                    "is_positive": bool(is_positive),
                }
            )
    return samples


def _build_unet(base_channels=16):
    """Small U-Net: 3-channel input, sigmoid probability output."""
    import torch
    import torch.nn as nn

    def block(cin, cout):
        return nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )

    class Net(nn.Module):
        def __init__(self):
            super().__init__()
            c = base_channels
            self.enc1 = block(3, c)
            self.enc2 = block(c, 2 * c)
            self.bottleneck = block(2 * c, 4 * c)
            self.pool = nn.MaxPool2d(2)
            self.up2 = nn.ConvTranspose2d(4 * c, 2 * c, 2, stride=2)
            self.dec2 = block(4 * c, 2 * c)
            self.up1 = nn.ConvTranspose2d(2 * c, c, 2, stride=2)
            self.dec1 = block(2 * c, c)
            self.head = nn.Conv2d(c, 1, 1)

        def forward(self, x):
            e1 = self.enc1(x)
            e2 = self.enc2(self.pool(e1))
            b = self.bottleneck(self.pool(e2))
            d2 = self.dec2(torch.cat([self.up2(b), e2], dim=1))
            d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
            return torch.sigmoid(self.head(d1))

    return Net()


def _soft_dice_loss(probs, targets, smooth=1.0):
    import torch

    p = probs.reshape(probs.shape[0], -1)
    t = targets.reshape(targets.shape[0], -1)
    inter = (p * t).sum(dim=1)
    denom = p.sum(dim=1) + t.sum(dim=1)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def train_segmenter(dataset, config: SegmenterConfig, val_dataset=None) -> SegmenterModel:
    """Train the patch segmenter; logs per-epoch loss and Dice curves."""
    if config.model in ("rule_based", "passthrough"):
        return SegmenterModel(
            kind=config.model,
            config=config,
            metadata={"epochs_run": 0, "final_loss": None, "training_log": []},
        )
    if not dataset:
        raise EmptyDatasetError("empty patch dataset")
    has_pos = any(s["truth"].any() for s in dataset)
    has_bg = any(not s["truth"].any() for s in dataset)
    if not (has_pos and has_bg):
        raise EmptyDatasetError("dataset must contain both lacune and background patches")

    import torch

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = _build_unet(config.base_channels)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    bce = torch.nn.BCELoss()

    def to_tensors(samples):
        x = torch.from_numpy(np.stack([s["channels"] for s in samples]))
        y = torch.from_numpy(np.stack([s["truth"] for s in samples])[:, np.newaxis].astype(np.float32))
        return x, y

    log = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        model.train()
        losses, dices = [], []
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[int(i)] for i in order[start : start + config.batch_size]]
            x, y = to_tensors(batch)
            probs = model(x)
            loss = _soft_dice_loss(probs, y) if config.loss == "dice" else bce(probs, y)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(value)
            hard = (probs.detach().numpy()[:, 0] >= 0.5)
            dices.extend(dice(h, s["truth"]) for h, s in zip(hard, batch))
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "train_dice": float(np.mean(dices)),
        }
        if val_dataset:
            entry.update(_validate(model, val_dataset, config, bce))
        log.append(entry)
    model.eval()
    metadata = {
        "epochs_run": config.epochs,
        "final_loss": log[-1]["train_loss"] if log else None,
        "training_log": log,
    }
    trained = SegmenterModel(kind="unet", config=config, metadata=metadata, module=model)
    if config.threshold == "optimize" and val_dataset:
        preds = [predict_patch(trained, _as_patch(s, config.patch_size)) for s in val_dataset]
        truths = [s["truth"] for s in val_dataset]
        metadata["optimized_threshold"] = optimize_threshold(preds, truths)
    return trained


def _as_patch(sample, size):
    return Patch2D(origin=(0, 0), size=size, channels=sample["channels"])


def _validate(model, val_dataset, config, bce):
    import torch

    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.stack([s["channels"] for s in val_dataset]))
        y = torch.from_numpy(
            np.stack([s["truth"] for s in val_dataset])[:, np.newaxis].astype(np.float32)
        )
        probs = model(x)
        loss = _soft_dice_loss(probs, y) if config.loss == "dice" else bce(probs, y)
        hard = probs.numpy()[:, 0] >= 0.5
    return {
        "val_loss": float(loss),
        "val_dice": float(np.mean([dice(h, s["truth"]) for h, s in zip(hard, val_dataset)])),
    }


def _rule_based_probabilities(patch: Patch2D, fg_threshold):
    t1 = patch.channels[0]
    flair = patch.channels[2]
    fg_t1 = t1 > fg_threshold
    fg_fl = flair > fg_threshold
    core = (ndimage.binary_fill_holes(fg_t1) & ~fg_t1) & (
        ndimage.binary_fill_holes(fg_fl) & ~fg_fl
    )
    return core.astype(np.float64)


def predict_patch(model: SegmenterModel, patch32: Patch2D, candidate=None):
    """Per-pixel lacune probabilities in [0, 1] for one patch.

    candidate is the stage-1 candidate mask patch; only the passthrough test
    double uses it (it returns it unchanged).
    """
    size = model.config.patch_size
    if patch32.channels.shape != (3, size, size):
        raise GeometryMismatchError(
            f"expected (3, {size}, {size}) patch, got {patch32.channels.shape}"
        )
    if model.kind == "unet":
        import torch

        model.module.eval()
        with torch.no_grad():
            x = torch.from_numpy(patch32.channels.astype(np.float32))[np.newaxis]
            return model.module(x).numpy()[0, 0].astype(np.float64)
    if model.kind == "rule_based":
        return _rule_based_probabilities(patch32, model.config.rule_fg_threshold)
    if model.kind == "passthrough":
        if candidate is None:
            raise ValueError("passthrough segmenter needs the candidate patch")
        return np.asarray(candidate, dtype=np.float64)
    raise ConfigError(f"unknown segmenter kind {model.kind!r}")


def optimize_threshold(predictions, truths, grid=DEFAULT_THRESHOLD_GRID):
    """Grid value maximizing mean per-pair Dice; ties go to the lowest value.

    Binarization is prediction >= threshold.
    """
    if len(predictions) == 0 or len(predictions) != len(truths):
        raise ValueError("need non-empty, equal-length prediction/truth lists")
    best_t, best_dice = None, -1.0
    for t in grid:
        mean_dice = float(
            np.mean([dice(np.asarray(p) >= t, tr) for p, tr in zip(predictions, truths)])
        )
        if mean_dice > best_dice:
            best_dice = mean_dice
            best_t = float(t)
    return best_t


def resolve_threshold(model: SegmenterModel, config: SegmenterConfig) -> float:
    if config.threshold == "optimize":
        return float(model.metadata.get("optimized_threshold", 0.5))
    return float(config.threshold)


def segment_candidates(
    case: MultiModalCase,
    candidate_map: Volume3D,
    subject_mask: Volume3D,
    model: SegmenterModel,
    config: SegmenterConfig = None,
) -> Volume3D:
    """Segment every 26-connected candidate component, slice by slice.

    On each slice a component occupies, one patch is centered on the
    component's in-slice centroid (clamped at borders), predicted, thresholded
    at the resolved posterior threshold, and OR-fused into the output. Voxels
    outside all candidate patches stay 0. When subject_mask is given,
    components with no voxel inside it are skipped.
    """
    config = config or model.config
    if candidate_map.shape != case.shape:
        raise GeometryMismatchError(
            f"candidate map {candidate_map.shape} does not match case {case.shape}"
        )
    if subject_mask is not None and not subject_mask.same_grid_as(case.t1):
        raise GeometryMismatchError("subject mask grid differs from case grid")
    if not np.isin(candidate_map.data, (0, 1)).all():
        raise GeometryMismatchError("candidate map must be binary")

    threshold = resolve_threshold(model, config)
    size = config.patch_size
    norm = normalize_case(case)
    planes = np.stack([m.data for m in norm.modalities()])  # (3, nx, ny, nz)
    out = np.zeros(case.shape, dtype=np.uint8)

    labels, n = ndimage.label(candidate_map.data, structure=CONNECTIVITY_26)
    for comp in range(1, n + 1):
        comp_mask = labels == comp
        if subject_mask is not None and not (comp_mask & subject_mask.data.astype(bool)).any():
            continue
        zs = np.unique(np.nonzero(comp_mask)[2])
        for z in zs:
            plane_mask = comp_mask[:, :, z]
            coords = np.argwhere(plane_mask)
            center = coords.mean(axis=0).round().astype(int)
            r, c = _patch_window(center, size, case.shape[:2])
            patch = Patch2D(
                origin=(r, c),
                size=size,
                channels=planes[:, r : r + size, c : c + size, z],
                slice_index=int(z),
            )
            cand_patch = candidate_map.data[r : r + size, c : c + size, z]
            probs = predict_patch(model, patch, candidate=cand_patch)
            out[r : r + size, c : c + size, z] |= (probs >= threshold).astype(np.uint8)
    return Volume3D(out, case.spacing)


def save_segmenter(model: SegmenterModel, path):
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


def load_segmenter(path) -> SegmenterModel:
    import torch

    payload = torch.load(path, map_location="cpu", weights_only=True)
    config = SegmenterConfig(**payload["config"])
    module = None
    if payload["state_dict"] is not None:
        module = _build_unet(config.base_channels)
        module.load_state_dict(payload["state_dict"])
        module.eval()
    return SegmenterModel(
        kind=payload["kind"], config=config, metadata=payload["metadata"], module=module
    )
