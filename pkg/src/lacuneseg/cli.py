"""Command-line entry point.

Subcommands: gen-phantoms, build-prevmap, train-detect, train-segment,
predict, evaluate. Config files are JSON whose keys mirror the corresponding
config dataclass; unknown keys are rejected, flags override file values.
Exit codes: 0 ok, 1 workflow error, 2 usage error.

Case directories contain t1.nii.gz, t2.nii.gz, flair.nii.gz and optionally
truth.nii.gz; a directory of cases holds one such subdirectory per case.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import detector as det_mod
from . import segmenter as seg_mod
from .errors import ConfigError, LacuneSegError
from .metrics import (
    DetInstance,
    MetricsReport,
    TruthInstance,
    detection_report,
    evaluate_case,
)
from .nifti import read_nifti, write_nifti
from .phantom import PhantomSpec, generate_phantom
from .pipeline import predict_case
from .prevalence import (
    build_frequency,
    dilate_map,
    remove_csf,
    symmetrize,
)
from .provenance import build_record, write_record
from .segmenter import sample_training_patches
from .volume import Volume3D, load_case

MODALITY_FILES = ("t1.nii.gz", "t2.nii.gz", "flair.nii.gz")


def config_from_file(cls, path, overrides=None):
    """Build a config dataclass from a JSON file, rejecting unknown keys."""
    values = {}
    if path:
        try:
            values = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}; known: {sorted(known)}")
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return cls(**values)


def _is_case_dir(path: Path) -> bool:
    return all((path / f).is_file() for f in MODALITY_FILES)


def find_cases(root):
    """A case dir itself, or every case subdirectory below root, sorted."""
    root = Path(root)
    if _is_case_dir(root):
        return [root]
    cases = sorted(p for p in root.iterdir() if p.is_dir() and _is_case_dir(p))
    if not cases:
        raise ConfigError(f"no case directories under {root}")
    return cases


def _load_case_dir(case_dir: Path):
    truth = case_dir / "truth.nii.gz"
    return load_case(
        case_dir / "t1.nii.gz",
        case_dir / "t2.nii.gz",
        case_dir / "flair.nii.gz",
        truth_path=truth if truth.is_file() else None,
        case_id=case_dir.name,
    )


def _load_mask(path) -> Volume3D:
    data, spacing = read_nifti(path)
    return Volume3D((np.asarray(data) >= 0.5).astype(np.uint8), spacing)


def _subject_mask_for(case_id, prevmask_path) -> Volume3D:
    """prevmask may be one file for all cases or a directory of per-case masks."""
    p = Path(prevmask_path)
    if p.is_dir():
        candidate = p / f"{case_id}.nii.gz"
        if not candidate.is_file():
            raise ConfigError(f"no subject mask {candidate}")
        return _load_mask(candidate)
    return _load_mask(p)


def cmd_gen_phantoms(args):
    spec = config_from_file(PhantomSpec, args.spec)
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    base_seed = args.seed if args.seed is not None else spec.seed
    outputs = []
    manifest_all = []
    for k in range(args.n):
        spec_k = dataclasses.replace(spec, seed=base_seed + k)
        phantom = generate_phantom(spec_k)
        case = phantom.case
        case_dir = out_root / case.case_id
        files = {
            "t1.nii.gz": case.t1,
            "t2.nii.gz": case.t2,
            "flair.nii.gz": case.flair,
            "truth.nii.gz": case.truth,
            "region.nii.gz": phantom.region_mask,
            "csf.nii.gz": phantom.csf_mask,
            "decoys.nii.gz": phantom.decoy_mask,
        }
        for name, vol in files.items():
            write_nifti(case_dir / name, vol.data, vol.spacing)
            outputs.append(case_dir / name)
        (case_dir / "manifest.json").write_text(
            json.dumps(phantom.manifest, indent=2, sort_keys=True)
        )
        manifest_all.append({"case_id": case.case_id, "seed": spec_k.seed, "components": phantom.manifest})
    (out_root / "manifest.json").write_text(json.dumps(manifest_all, indent=2, sort_keys=True))
    record = build_record(
        "gen-phantoms", asdict(spec), base_seed, inputs=[], outputs=outputs
    )
    write_record(out_root / "provenance.json", record)
    print(f"wrote {args.n} phantoms to {out_root}")
    return 0


def cmd_build_prevmap(args):
    mask_dir = Path(args.masks)
    mask_files = sorted(mask_dir.glob("*.nii.gz")) or sorted(mask_dir.glob("*.nii"))
    if not mask_files:
        # also accept a directory of case dirs with truth masks
        mask_files = [p / "truth.nii.gz" for p in find_cases(mask_dir) if (p / "truth.nii.gz").is_file()]
    if not mask_files:
        raise ConfigError(f"no mask files under {mask_dir}")
    masks = [_load_mask(p) for p in mask_files]
    pm = build_frequency(masks)
    if not args.no_symmetrize:
        pm = symmetrize(pm, midline_axis=args.symmetrize_axis)
    if args.dilate_mm > 0:
        pm = dilate_map(pm, args.dilate_mm)
    if args.csf:
        pm = remove_csf(pm, _load_mask(args.csf))
    out = Path(args.out)
    write_nifti(out, pm.mask.data, pm.mask.spacing)
    freq_path = Path(str(out).replace(".nii.gz", "").replace(".nii", "") + "_frequency.nii.gz")
    write_nifti(freq_path, pm.frequency.data.astype(np.float32), pm.frequency.spacing)
    config = {
        "masks": [str(p) for p in mask_files],
        "csf": args.csf,
        "dilate_mm": args.dilate_mm,
        "symmetrize_axis": None if args.no_symmetrize else args.symmetrize_axis,
        "provenance": asdict(pm.provenance),
    }
    record = build_record(
        "build-prevmap", config, seed=None, inputs=mask_files, outputs=[out, freq_path]
    )
    write_record(Path(str(out) + ".provenance.json"), record)
    print(f"prevalence mask: {out} ({int(pm.mask.data.sum())} voxels)")
    return 0


def cmd_train_detect(args):
    config = config_from_file(
        det_mod.DetectorConfig,
        args.config,
        overrides={"seed": args.seed, "epochs": args.epochs, "model": args.model},
    )
    case_dirs = find_cases(args.cases)
    cases = [_load_case_dir(d) for d in case_dirs]
    dataset = [] if config.model == "rule_based" else det_mod.build_training_set(cases, config)
    model = det_mod.train_detector(dataset, config)
    det_mod.save_detector(model, args.out)
    record = build_record(
        "train-detect",
        asdict(config),
        config.seed,
        inputs=[p for d in case_dirs for p in d.glob("*.nii.gz")],
        outputs=[args.out],
        timing=None,
    )
    record["training"] = model.metadata
    write_record(Path(str(args.out) + ".provenance.json"), record)
    final = model.metadata.get("final_loss")
    print(f"detector ({model.kind}) saved to {args.out}; final loss: {final}")
    return 0


def cmd_train_segment(args):
    config = config_from_file(
        seg_mod.SegmenterConfig,
        args.config,
        overrides={"seed": args.seed, "epochs": args.epochs, "model": args.model},
    )
    case_dirs = find_cases(args.cases)
    val_ids = set()
    if args.val_split:
        val_ids = {
            line.strip() for line in Path(args.val_split).read_text().splitlines() if line.strip()
        }
    train_dirs = [d for d in case_dirs if d.name not in val_ids]
    val_dirs = [d for d in case_dirs if d.name in val_ids]
    if not train_dirs:
        raise ConfigError("the validation split leaves no training cases")

    def build_set(dirs, seed, n_positives):
        if not dirs:
            return None
        cases = [_load_case_dir(d) for d in dirs]
        masks = [_subject_mask_for(c.case_id, args.prevmask) for c in cases]
        return sample_training_patches(
            cases,
            masks,
            ratio=config.lacune_background_ratio,
            seed=seed,
            patch_size=config.patch_size,
            n_positives=n_positives,
            jitter=config.jitter,
        )

    dataset = None
    val_set = None
    if config.model == "unet":
        dataset = build_set(train_dirs, config.seed, args.n_positives)
        val_set = build_set(val_dirs, config.seed + 1, args.n_positives)
    model = seg_mod.train_segmenter(dataset, config, val_dataset=val_set)
    seg_mod.save_segmenter(model, args.out)
    record = build_record(
        "train-segment",
        asdict(config),
        config.seed,
        inputs=[p for d in case_dirs for p in d.glob("*.nii.gz")],
        outputs=[args.out],
    )
    record["training"] = {k: v for k, v in model.metadata.items()}
    record["val_cases"] = sorted(d.name for d in val_dirs)
    write_record(Path(str(args.out) + ".provenance.json"), record)
    print(
        f"segmenter ({model.kind}) saved to {args.out}; "
        f"optimized threshold: {model.metadata.get('optimized_threshold')}"
    )
    return 0


def _detection_sidecar(result, upsample_factor):
    rows = []
    for d in result.detections:
        r0, c0, r1, c1 = d.bbox
        f = upsample_factor
        gr, gc = d.patch_origin
        rows.append(
            {
                "slice_index": int(d.slice_index),
                "score": float(d.score),
                "bbox_orig_px": [
                    int(gr + r0 // f),
                    int(gc + c0 // f),
                    int(gr + int(np.ceil(r1 / f))),
                    int(gc + int(np.ceil(c1 / f))),
                ],
                "area_up_px2": int((d.mask > 0).sum()),
            }
        )
    return {"upsample_factor": upsample_factor, "detections": rows}


def _predict_one(case_dir, detector, segmenter, args, out_dir):
    case = _load_case_dir(case_dir)
    subject_mask = _subject_mask_for(case.case_id, args.prevmask)
    result = predict_case(case, detector, segmenter, subject_mask)
    seg_path = out_dir / f"{case.case_id}_seg.nii.gz"
    unc_path = out_dir / f"{case.case_id}_unc.nii.gz"
    write_nifti(seg_path, result.segmentation.data, result.segmentation.spacing)
    write_nifti(unc_path, result.uncertainty.data, result.uncertainty.spacing)
    det_path = out_dir / f"{case.case_id}_detections.json"
    det_path.write_text(
        json.dumps(
            _detection_sidecar(result, detector.config.upsample_factor),
            indent=2,
            sort_keys=True,
        )
    )
    prov_path = out_dir / f"{case.case_id}_provenance.json"
    record = build_record(
        "predict",
        {"detector": asdict(detector.config), "segmenter": asdict(segmenter.config)},
        detector.config.seed,
        inputs=list(case_dir.glob("*.nii.gz")),
        outputs=[seg_path, unc_path, det_path],
    )
    record["pipeline"] = result.provenance
    write_record(prov_path, record)
    if args.overlay:
        _write_overlays(Path(args.overlay), case, result, subject_mask)
    return case.case_id, result


def cmd_predict(args):
    detector = det_mod.load_detector(args.detector)
    segmenter = seg_mod.load_segmenter(args.segmenter)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    case_dirs = find_cases(args.case)
    jobs = max(1, args.jobs)
    if jobs == 1 or len(case_dirs) == 1:
        results = [_predict_one(d, detector, segmenter, args, out_dir) for d in case_dirs]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(
                pool.map(lambda d: _predict_one(d, detector, segmenter, args, out_dir), case_dirs)
            )
    for case_id, result in sorted(results):
        voxels = int(result.segmentation.data.sum())
        print(f"{case_id}: {voxels} segmented voxels, {len(result.detections)} stage-1 detections")
    return 0


def _write_overlays(overlay_dir, case, result, subject_mask):
    from PIL import Image

    overlay_dir.mkdir(parents=True, exist_ok=True)
    flair = case.flair.data
    lo, hi = np.percentile(flair, (1, 99))
    base = np.clip((flair - lo) / max(hi - lo, 1e-9), 0, 1)
    seg = result.segmentation.data.astype(bool)
    truth = case.truth.data.astype(bool) if case.truth is not None else np.zeros_like(seg)
    prior = subject_mask.data.astype(bool)
    slices = np.unique(np.concatenate([np.nonzero(seg)[2], np.nonzero(truth)[2]]))
    for z in slices:
        rgb = np.stack([base[:, :, z]] * 3, axis=-1)
        rgb[prior[:, :, z]] = rgb[prior[:, :, z]] * 0.7 + np.array([0.3, 0.21, 0.27])
        rgb[truth[:, :, z]] = [1.0, 0.15, 0.15]
        rgb[seg[:, :, z] & ~truth[:, :, z]] = [0.2, 0.4, 1.0]
        rgb[seg[:, :, z] & truth[:, :, z]] = [0.8, 0.2, 0.8]
        img = Image.fromarray((rgb * 255).astype(np.uint8).transpose(1, 0, 2))
        img.save(overlay_dir / f"{case.case_id}_z{int(z):03d}.png")


def _truth_path_for(case_id, truth_root: Path):
    candidates = [
        truth_root / case_id / "truth.nii.gz",
        truth_root / f"{case_id}_truth.nii.gz",
        truth_root / f"{case_id}.nii.gz",
    ]
    for c in candidates:
        if c.is_file():
            return c
    raise ConfigError(f"no truth found for case {case_id} under {truth_root}")


def _truth_instances_for_ap(case_id, truth: Volume3D, upsample_factor):
    from scipy import ndimage

    instances = []
    f = upsample_factor
    for z in range(truth.shape[2]):
        plane = truth.data[:, :, z]
        if not plane.any():
            continue
        labels, n = ndimage.label(plane, structure=np.ones((3, 3), dtype=bool))
        for sl_idx, sl in enumerate(ndimage.find_objects(labels), start=1):
            comp = labels[sl] == sl_idx
            instances.append(
                TruthInstance(
                    image_id=(case_id, z),
                    box=(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop),
                    area=float(comp.sum() * f * f),
                )
            )
    return instances


def cmd_evaluate(args):
    pred_dir = Path(args.pred)
    truth_root = Path(args.truth)
    seg_files = sorted(pred_dir.glob("*_seg.nii.gz"))
    if not seg_files:
        raise ConfigError(f"no *_seg.nii.gz files under {pred_dir}")
    per_case = []
    dets, truth_instances = [], []
    have_sidecars = False
    for seg_path in seg_files:
        case_id = seg_path.name[: -len("_seg.nii.gz")]
        pred = _load_mask(seg_path)
        truth = _load_mask(_truth_path_for(case_id, truth_root))
        if pred.shape != truth.shape:
            raise ConfigError(f"{case_id}: prediction shape {pred.shape} != truth {truth.shape}")
        per_case.append(evaluate_case(case_id, pred.data, truth.data))
        sidecar = pred_dir / f"{case_id}_detections.json"
        if sidecar.is_file():
            have_sidecars = True
            payload = json.loads(sidecar.read_text())
            f = payload.get("upsample_factor", 4)
            for row in payload["detections"]:
                r0, c0, r1, c1 = row["bbox_orig_px"]
                dets.append(
                    DetInstance(
                        image_id=(case_id, row["slice_index"]),
                        score=row["score"],
                        box=(r0, c0, max(r1, r0 + 1), max(c1, c0 + 1)),
                    )
                )
            truth_instances.extend(_truth_instances_for_ap(case_id, truth, f))

    metrics_report = MetricsReport(per_case=per_case)
    if have_sidecars:
        detection = detection_report(dets, truth_instances)
        metrics_report.ap_by_size = detection["ap"]
        metrics_report.ap50_by_size = detection["ap50"]
        metrics_report.ar_by_size = detection["ar"]
    report = metrics_report.as_dict()
    per_case = sorted(per_case, key=lambda c: c.case_id)
    tp, fp, fn = metrics_report.lesionwise
    out_prefix = Path(args.out)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    json_path = Path(str(out_prefix) + ".json")
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True, default=str))
    csv_path = Path(str(out_prefix) + ".csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "metric", "value"])
        for c in per_case:
            for metric in ("dice", "iou", "tp", "fp", "fn"):
                writer.writerow([c.case_id, metric, getattr(c, metric)])
        for key, value in report["aggregate"].items():
            if isinstance(value, dict):
                for k2, v2 in value.items():
                    writer.writerow(["ALL", f"{key}_{k2}", v2])
            else:
                writer.writerow(["ALL", key, value])
    record = build_record(
        "evaluate",
        {"pred": str(pred_dir), "truth": str(truth_root)},
        seed=None,
        inputs=seg_files,
        outputs=[json_path, csv_path],
    )
    write_record(Path(str(out_prefix) + ".provenance.json"), record)
    agg = report["aggregate"]
    print(
        f"{len(per_case)} cases: mean Dice {agg['mean_dice']:.4f}, "
        f"lesionwise TP {tp} FP {fp} FN {fn}"
    )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lacuneseg",
        description="Two-stage lacune detection and segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-phantoms", help="generate synthetic phantom cases")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--spec", help="PhantomSpec JSON file")
    p.add_argument("--seed", type=int, default=None, help="base seed (default: spec seed)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_phantoms)

    p = sub.add_parser("build-prevmap", help="build the lesion prevalence mask")
    p.add_argument("--masks", required=True, help="directory of registered binary masks")
    p.add_argument("--csf", help="CSF mask to exclude")
    p.add_argument("--dilate-mm", type=float, default=7.0)
    p.add_argument("--symmetrize-axis", type=int, default=0)
    p.add_argument("--no-symmetrize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build_prevmap)

    p = sub.add_parser("train-detect", help="train the stage-1 detector")
    p.add_argument("--cases", required=True)
    p.add_argument("--config", help="DetectorConfig JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--model", choices=["maskrcnn", "rule_based"], default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_detect)

    p = sub.add_parser("train-segment", help="train the stage-2 segmenter")
    p.add_argument("--cases", required=True)
    p.add_argument("--prevmask", required=True, help="subject-space mask file or directory")
    p.add_argument("--config", help="SegmenterConfig JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--model", choices=["unet", "rule_based", "passthrough"], default=None)
    p.add_argument("--val-split", help="file listing validation case ids, one per line")
    p.add_argument("--n-positives", type=int, default=None, help="cap on positive patch count")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_segment)

    p = sub.add_parser("predict", help="run the full pipeline on cases")
    p.add_argument("--case", required=True, help="case directory or directory of cases")
    p.add_argument("--detector", required=True)
    p.add_argument("--segmenter", required=True)
    p.add_argument("--prevmask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", help="directory for per-slice overlay PNGs")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="compare predictions against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True, help="report path prefix (.json/.csv added)")
    p.set_defaults(fn=cmd_evaluate)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except LacuneSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
