"""Image-subtraction brain tumour segmentation pipeline."""

from subseg.volume_io import Modality, Volume, normalize_intensity, read_nifti, read_raw, write_raw
from subseg.subtraction import CaseVolumes, StreamId, build_streams, subtract_volumes
from subseg.dataset import (
    AugmentSpec,
    SliceSample,
    SplitSpec,
    augment_sample,
    binarize_labels,
    slice_volume,
    split_dataset,
)
from subseg.kernels import Box, Instance, connected_components, iou, nms, paste_mask, roi_align, select_top_instance
from subseg.segmenter import (
    PredictionSet,
    SegmenterParams,
    baseline_segment,
    load_predictions,
    rle_decode,
    rle_encode,
    write_predictions,
)
from subseg.ensemble import FusionStrategy, fuse
from subseg.metrics import MetricsReport, SliceMetrics, aggregate, compare_runs, slice_metrics

__version__ = "0.1.0"
