"""Per-slice instance prediction and the prediction interchange format.

The baseline segmenter is a classical stand-in for a trained network:
threshold, label components, score each by its mean intensity, suppress
overlaps. Externally produced predictions enter the pipeline through the
JSON-lines format handled by :func:`write_predictions` /
:func:`load_predictions`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from subseg._atomic import atomic_write_text
from subseg.errors import LengthError, ParseError, ValidationError
from subseg.kernels import Box, Instance, connected_components, nms

STREAM_NAMES = ("t1", "t2", "fused")


@dataclass(frozen=True)
class SegmenterParams:
    threshold_mode: str = "otsu"
    percentile: float = 50.0
    min_area: int = 20
    connectivity: int = 4
    max_instances: int = 100
    nms_iou: float = 0.5

    def __post_init__(self):
        if self.threshold_mode not in ("otsu", "percentile"):
            raise ValidationError(f"threshold_mode must be otsu or percentile, got {self.threshold_mode!r}")
        if not 0 < self.percentile < 100:
            raise ValidationError("percentile must lie in (0, 100)")
        if self.min_area < 1:
            raise ValidationError("min_area must be >= 1")
        if self.connectivity not in (4, 8):
            raise ValidationError("connectivity must be 4 or 8")
        if self.max_instances < 1:
            raise ValidationError("max_instances must be >= 1")
        if not 0 <= self.nms_iou <= 1:
            raise ValidationError("nms_iou must lie in [0, 1]")


@dataclass
class PredictionSet:
    case_id: str
    slice_index: int
    stream_id: str
    shape: tuple[int, int]
    instances: list[Instance] = field(default_factory=list)

    @property
    def key(self) -> tuple[str, int]:
        return (self.case_id, self.slice_index)

    def __eq__(self, other):
        if not isinstance(other, PredictionSet):
            return NotImplemented
        # an empty set has no recorded shape once serialized
        same_shape = not self.instances or tuple(self.shape) == tuple(other.shape)
        return (
            self.key == other.key
            and self.stream_id == other.stream_id
            and same_shape
            and self.instances == other.instances
        )


def otsu_threshold(values: np.ndarray) -> float:
    """Otsu's threshold over exact sample values.

    Returns the largest value of the lower class; foreground is ``> t``. With
    fewer than two distinct values there is nothing to split and 0 is
    returned, so every nonzero sample counts as foreground.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    uniq, counts = np.unique(values, return_counts=True)
    if uniq.size < 2:
        return 0.0
    w0 = np.cumsum(counts)[:-1].astype(np.float64)
    s0 = np.cumsum(uniq * counts)[:-1]
    total_w = counts.sum()
    total_s = (uniq * counts).sum()
    w1 = total_w - w0
    m0 = s0 / w0
    m1 = (total_s - s0) / w1
    between = w0 * w1 * (m0 - m1) ** 2
    return float(uniq[int(np.argmax(between))])


def foreground(image: np.ndarray, params: SegmenterParams) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    nonzero = image[image != 0]
    if nonzero.size == 0:
        return np.zeros(image.shape, dtype=bool)
    if params.threshold_mode == "otsu":
        t = otsu_threshold(nonzero)
    else:
        t = float(np.percentile(nonzero, params.percentile))
    return (image > t) & (image != 0)


def baseline_segment(image: np.ndarray, params: SegmenterParams, case_id="", slice_index=0, stream_id="t1") -> PredictionSet:
    """Segment one 2D slice image into scored instances."""
    image = np.asarray(image, dtype=np.float64)
    fg = foreground(image, params)
    candidates = []
    for comp in connected_components(fg, params.connectivity):
        if comp.area < params.min_area:
            continue
        score = float(np.clip(image[comp.mask].mean(), 0.0, 1.0))
        candidates.append(Instance(comp.box, score, comp.mask))
    kept = nms(candidates, params.nms_iou, params.max_instances)
    return PredictionSet(case_id, int(slice_index), stream_id, image.shape, kept)


def segment_sample(sample, params: SegmenterParams) -> PredictionSet:
    return baseline_segment(sample.image, params, sample.case_id, sample.slice_index, sample.stream_id)


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating zero-runs and one-runs, zero-run first."""
    flat = np.asarray(mask).astype(bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def rle_decode(counts: Iterable[int], height: int, width: int) -> np.ndarray:
    counts = np.asarray(list(counts), dtype=np.int64)
    if (counts < 0).any():
        raise LengthError("negative run length")
    total = int(counts.sum())
    if total != height * width:
        raise LengthError(f"run lengths sum to {total}, expected {height * width}")
    values = np.arange(counts.size) % 2 == 1
    return np.repeat(values, counts).reshape(height, width)


def _instance_record(inst: Instance, shape) -> dict:
    mask = inst.full_mask(*shape)
    return {
        "box": [float(v) for v in inst.box],
        "score": float(inst.score),
        "size": [int(shape[0]), int(shape[1])],
        "counts": rle_encode(mask),
    }


def prediction_record(pred: PredictionSet) -> str:
    obj = {
        "case_id": pred.case_id,
        "slice_index": int(pred.slice_index),
        "stream": pred.stream_id,
        "instances": [_instance_record(inst, pred.shape) for inst in pred.instances],
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_predictions(preds: Iterable[PredictionSet], path) -> None:
    """Write records sorted by (case_id, slice_index, stream), atomically."""
    ordered = sorted(preds, key=lambda p: (p.case_id, p.slice_index, p.stream_id))
    text = "".join(prediction_record(p) + "\n" for p in ordered)
    atomic_write_text(path, text)


def parse_prediction_line(line: str, lineno: int) -> PredictionSet:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", lineno) from exc
    try:
        case_id = obj["case_id"]
        slice_index = obj["slice_index"]
        stream = obj["stream"]
        records = obj["instances"]
        if not isinstance(case_id, str) or not isinstance(slice_index, int) or isinstance(slice_index, bool):
            raise TypeError("case_id must be a string and slice_index an integer")
        if stream not in STREAM_NAMES:
            raise ValueError(f"unknown stream {stream!r}")
        if not isinstance(records, list):
            raise TypeError("instances must be an array")
        instances = []
        shape = None
        for rec in records:
            h, w = (int(v) for v in rec["size"])
            if shape is None:
                shape = (h, w)
            elif shape != (h, w):
                raise ValueError("instance sizes differ within one record")
            box = [float(v) for v in rec["box"]]
            if len(box) != 4:
                raise ValueError("box needs four coordinates")
            try:
                mask = rle_decode(rec["counts"], h, w)
            except LengthError as exc:
                raise LengthError(str(exc), lineno) from exc
            instances.append(Instance(Box(*box), float(rec["score"]), mask))
    except LengthError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed record: {exc}", lineno) from exc
    return PredictionSet(case_id, slice_index, stream, shape or (0, 0), instances)


def load_predictions(path) -> dict[tuple[str, int, str], PredictionSet]:
    """Read an interchange file into ``{(case_id, slice_index, stream): PredictionSet}``.

    Records with no instances carry no size; their shape is ``(0, 0)``.
    """
    out: dict[tuple[str, int, str], PredictionSet] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            pred = parse_prediction_line(line, lineno)
            key = (pred.case_id, pred.slice_index, pred.stream_id)
            if key in out:
                raise ParseError(f"duplicate record for {key}", lineno)
            out[key] = pred
    return out


def predictions_by_slice(preds: Mapping[tuple[str, int, str], PredictionSet], stream: str) -> dict[tuple[str, int], PredictionSet]:
    return {(c, s): p for (c, s, st), p in preds.items() if st == stream}
