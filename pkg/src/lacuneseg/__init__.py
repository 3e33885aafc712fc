"""Two-stage detection and segmentation of brain lacunes on multi-modal MR."""

from .detector import (
    Detection,
    DetectorConfig,
    DetectorModel,
    RuleParams,
    build_training_set,
    candidates_from_detections,
    detect,
    rule_based_detect,
    train_detector,
)
from .metrics import (
    MetricsReport,
    average_precision,
    average_recall,
    dice,
    iou,
    iou_boxes,
    lesionwise_counts,
)
from .phantom import Phantom, PhantomSpec, generate_phantom
from .pipeline import SegmentationResult, make_uncertainty, predict_case
from .prevalence import (
    PrevalenceMap,
    apply_mask,
    build_frequency,
    dilate_mm,
    remove_csf,
    resample_to_subject,
    symmetrize,
)
from .segmenter import (
    SegmenterConfig,
    SegmenterModel,
    optimize_threshold,
    predict_patch,
    sample_training_patches,
    segment_candidates,
    train_segmenter,
)
from .patches import (
    Patch2D,
    PatchGrid,
    compute_grid,
    downsample_nn,
    extract_patches,
    reconstruct,
    upsample_nn,
)
from .volume import (
    MultiModalCase,
    SliceStack,
    Volume3D,
    fuse_truth_masks,
    load_case,
    normalize_case,
    slice_stack,
    zscore_normalize,
)

__version__ = "0.1.0"
