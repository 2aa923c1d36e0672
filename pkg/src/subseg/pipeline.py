"""Stage functions behind the ``subseg`` commands.

Output layout under ``output_root``::

    volumes/<case>/{T1,T1GD,T2,FLAIR,LABEL}.raw   convert  (images normalized)
    streams/<case>/{t1,t2}.raw                     subtract
    streams/<case>/mask.raw                        slice    (binarized label)
    slices.txt                                     slice
    split.txt                                      split
    predictions/{t1,t2}.jsonl                      predict
    predictions/fused.jsonl                        fuse
    reports/report_<stream>.txt                    evaluate

Every stage reads only files written by earlier stages, writes through a
temp-file rename, and emits records in sorted key order so the worker count
never changes output bytes.
"""
from __future__ import annotations

import logging
import os
import re
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from subseg._atomic import atomic_write_text
from subseg.config import PipelineConfig
from subseg.dataset import (
    Split,
    binarize_labels,
    read_split_manifest,
    split_dataset,
    write_split_manifest,
)
from subseg.ensemble import fused_prediction
from subseg.errors import DataError, MissingModalityError, ParseError, ValidationError
from subseg.kernels import select_top_instance
from subseg.metrics import MetricsReport, aggregate, read_report, slice_metrics, write_report
from subseg.phantom import PhantomParams, write_phantom_dataset
from subseg.segmenter import (
    PredictionSet,
    baseline_segment,
    load_predictions,
    predictions_by_slice,
    write_predictions,
)
from subseg.subtraction import CaseVolumes, StreamId, build_streams, raw_streams
from subseg.volume_io import Modality, normalize_intensity, read_nifti, read_raw, write_raw

log = logging.getLogger(__name__)

SLICES_HEADER = "SUBSEGSLICES v1"
IMAGE_MODALITIES = (Modality.T1, Modality.T1GD, Modality.T2, Modality.FLAIR)
ALL_MODALITIES = IMAGE_MODALITIES + (Modality.LABEL,)
STREAMS = (StreamId.T1_STREAM.value, StreamId.T2_STREAM.value)

_SUFFIXES = {
    "t1": Modality.T1,
    "t1ce": Modality.T1GD,
    "t1gd": Modality.T1GD,
    "t2": Modality.T2,
    "flair": Modality.FLAIR,
    "seg": Modality.LABEL,
    "label": Modality.LABEL,
}
_CASE_FILE = re.compile(r"^(?P<case>.+)_(?P<suffix>[A-Za-z0-9]+)\.(?P<ext>nii|nii\.gz|raw)$")


def worker_count(threads: int) -> int:
    return threads if threads > 0 else (os.cpu_count() or 1)


def parallel_map(fn, items, threads: int) -> list:
    """Ordered map over ``items``; results come back in input order."""
    items = list(items)
    n = worker_count(threads)
    if n == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _require(path: Path) -> Path:
    if not path.exists():
        raise DataError(f"missing prerequisite: {path}")
    return path


# ---------------------------------------------------------------- convert


def discover_cases(dataset_root) -> dict[str, dict[Modality, Path]]:
    """Map case id -> modality -> file for a BraTS-style directory tree."""
    root = _require(Path(dataset_root))
    cases: dict[str, dict[Modality, Path]] = {}
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        m = _CASE_FILE.match(path.name)
        if not m or m.group("suffix").lower() not in _SUFFIXES:
            continue
        modality = _SUFFIXES[m.group("suffix").lower()]
        files = cases.setdefault(m.group("case"), {})
        if modality in files:
            raise DataError(f"two {modality.value} files for case {m.group('case')}: {files[modality]}, {path}")
        files[modality] = path
    if not cases:
        raise DataError(f"no cases found under {root}")
    return dict(sorted(cases.items()))


def _read_any(path: Path, modality: Modality):
    vol = read_raw(path) if path.suffix == ".raw" else read_nifti(path, modality)
    vol.modality = modality
    return vol


def convert_case(case_id: str, files: dict[Modality, Path], cfg: PipelineConfig) -> None:
    missing = [m.value for m in ALL_MODALITIES if m not in files]
    if missing:
        raise MissingModalityError(missing, case_id)
    out_dir = cfg.output_root / "volumes" / case_id
    for modality in ALL_MODALITIES:
        vol = _read_any(files[modality], modality)
        vol.case_id = case_id
        if modality is not Modality.LABEL:
            vol = normalize_intensity(vol, cfg.lo_pct, cfg.hi_pct)
        write_raw(vol, out_dir / f"{modality.value}.raw")


def run_convert(cfg: PipelineConfig) -> list[str]:
    if cfg.dataset_root is None:
        raise ValidationError("dataset_root is not configured")
    cases = discover_cases(cfg.dataset_root)
    parallel_map(lambda item: convert_case(item[0], item[1], cfg), cases.items(), cfg.threads)
    log.info("converted %d cases", len(cases))
    return list(cases)


# ---------------------------------------------------------------- subtract


def converted_cases(cfg: PipelineConfig) -> list[str]:
    root = _require(cfg.output_root / "volumes")
    ids = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not ids:
        raise DataError(f"no converted cases in {root}")
    return ids


def load_case(cfg: PipelineConfig, case_id: str) -> CaseVolumes:
    case_dir = cfg.output_root / "volumes" / case_id
    vols = {}
    for modality in ALL_MODALITIES:
        path = case_dir / f"{modality.value}.raw"
        if path.exists():
            vols[modality.value.lower()] = read_raw(path)
    return CaseVolumes(case_id, **vols)


def subtract_case(cfg: PipelineConfig, case_id: str) -> None:
    case = load_case(cfg, case_id)
    streams = build_streams(case) if cfg.source == "subtraction" else raw_streams(case)
    out_dir = cfg.output_root / "streams" / case_id
    for stream in streams:
        write_raw(stream.volume, out_dir / f"{stream.stream_id.value}.raw")


def run_subtract(cfg: PipelineConfig) -> list[str]:
    ids = converted_cases(cfg)
    parallel_map(lambda cid: subtract_case(cfg, cid), ids, cfg.threads)
    return ids


# ---------------------------------------------------------------- slice


def slice_case(cfg: PipelineConfig, case_id: str) -> list[tuple[str, int, int]]:
    label = read_raw(_require(cfg.output_root / "volumes" / case_id / "LABEL.raw"))
    stream = read_raw(_require(cfg.output_root / "streams" / case_id / "t1.raw"))
    if stream.dims != label.dims:
        raise DataError(f"{case_id}: stream dims {stream.dims} != label dims {label.dims}")
    mask = binarize_labels(label, cfg.positive_labels)
    write_raw(mask, cfg.output_root / "streams" / case_id / "mask.raw")
    counts = mask.data.reshape(mask.depth, -1).sum(axis=1).astype(np.int64)
    return [
        (case_id, z, int(n))
        for z, n in enumerate(counts)
        if not (cfg.skip_empty and n == 0)
    ]


def run_slice(cfg: PipelineConfig) -> int:
    ids = converted_cases(cfg)
    rows = [r for rows in parallel_map(lambda cid: slice_case(cfg, cid), ids, cfg.threads) for r in rows]
    lines = [SLICES_HEADER] + [f"{c},{z},{n}" for c, z, n in sorted(rows)]
    atomic_write_text(cfg.output_root / "slices.txt", "\n".join(lines) + "\n")
    return len(rows)


def read_slice_manifest(path) -> list[tuple[str, int, int]]:
    lines = _require(Path(path)).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != SLICES_HEADER:
        raise ParseError(f"{path}: missing {SLICES_HEADER} header", 1)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            case_id, z, n = line.split(",")
            rows.append((case_id, int(z), int(n)))
        except ValueError as exc:
            raise ParseError(f"{path}: malformed slice record {line!r}", lineno) from exc
    return rows


# ---------------------------------------------------------------- split


def run_split(cfg: PipelineConfig):
    rows = read_slice_manifest(cfg.output_root / "slices.txt")
    spec = split_dataset([(c, z) for c, z, _ in rows], cfg.split_ratios, cfg.seed, cfg.group_by_case)
    write_split_manifest(spec, cfg.output_root / "split.txt")
    return spec


def subset_keys(cfg: PipelineConfig) -> list[tuple[str, int]]:
    spec = read_split_manifest(_require(cfg.output_root / "split.txt"))
    if cfg.predict_subset == "all":
        return sorted(spec.assignments)
    return spec.keys(Split(cfg.predict_subset.upper()))


def _by_case(keys):
    grouped = defaultdict(list)
    for case_id, z in keys:
        grouped[case_id].append(z)
    return dict(sorted(grouped.items()))


# ---------------------------------------------------------------- predict


def predict_case(cfg: PipelineConfig, case_id: str, slices: list[int]) -> list[PredictionSet]:
    out = []
    for stream in STREAMS:
        vol = read_raw(_require(cfg.output_root / "streams" / case_id / f"{stream}.raw"))
        for z in slices:
            out.append(baseline_segment(vol.data[z], cfg.segmenter, case_id, z, stream))
    return out


def run_predict(cfg: PipelineConfig) -> int:
    grouped = _by_case(subset_keys(cfg))
    results = parallel_map(lambda item: predict_case(cfg, *item), grouped.items(), cfg.threads)
    preds = [p for group in results for p in group]
    for stream in STREAMS:
        write_predictions(
            [p for p in preds if p.stream_id == stream],
            cfg.output_root / "predictions" / f"{stream}.jsonl",
        )
    return len(preds)


# ---------------------------------------------------------------- fuse


def _mask_volume(cfg: PipelineConfig, case_id: str):
    return read_raw(_require(cfg.output_root / "streams" / case_id / "mask.raw"))


def _load_stream(cfg: PipelineConfig, stream: str) -> dict[tuple[str, int], PredictionSet]:
    path = _require(cfg.output_root / "predictions" / f"{stream}.jsonl")
    return predictions_by_slice(load_predictions(path), stream)


def run_fuse(cfg: PipelineConfig) -> int:
    t1 = _load_stream(cfg, "t1")
    t2 = _load_stream(cfg, "t2")
    grouped = _by_case(subset_keys(cfg))

    def fuse_case(item):
        case_id, slices = item
        shape = _mask_volume(cfg, case_id).data.shape[1:]
        out = []
        for z in slices:
            empty = lambda s: PredictionSet(case_id, z, s, shape)  # noqa: E731
            p1 = t1.get((case_id, z)) or empty("t1")
            p2 = t2.get((case_id, z)) or empty("t2")
            out.append(fused_prediction(p1, p2, cfg.fusion, shape))
        return out

    fused = [p for group in parallel_map(fuse_case, grouped.items(), cfg.threads) for p in group]
    write_predictions(fused, cfg.output_root / "predictions" / "fused.jsonl")
    return len(fused)


# ---------------------------------------------------------------- evaluate


def prediction_mask(pred: PredictionSet | None, shape) -> np.ndarray:
    """Final mask for a slice: the single most confident instance, if any."""
    if pred is None:
        return np.zeros(shape, dtype=bool)
    top = select_top_instance(pred.instances)
    if top is None:
        return np.zeros(shape, dtype=bool)
    return top.full_mask(*shape)


def report_path(output_root, stream: str) -> Path:
    return Path(output_root) / "reports" / f"report_{stream}.txt"


def run_evaluate(cfg: PipelineConfig, stream="fused") -> MetricsReport:
    preds = _load_stream(cfg, stream)
    grouped = _by_case(subset_keys(cfg))

    def eval_case(item):
        case_id, slices = item
        gt = _mask_volume(cfg, case_id).data
        return [
            ((case_id, z), slice_metrics(prediction_mask(preds.get((case_id, z)), gt.shape[1:]), gt[z]))
            for z in slices
        ]

    per_slice = [m for group in parallel_map(eval_case, grouped.items(), cfg.threads) for m in group]
    report = aggregate(per_slice, cfg.skip_empty_gt, f"stream={stream};{cfg.fingerprint()}")
    write_report(report, report_path(cfg.output_root, stream))
    return report


def load_run_report(run, stream="fused") -> MetricsReport:
    path = Path(run)
    if path.is_dir():
        path = report_path(path, stream)
    return read_report(_require(path))


# ---------------------------------------------------------------- phantom / all


def run_phantom(cfg: PipelineConfig, params: PhantomParams = PhantomParams()) -> list[str]:
    if cfg.dataset_root is None:
        raise ValidationError("dataset_root is not configured")
    return write_phantom_dataset(cfg.dataset_root, cfg.phantom_cases, cfg.seed, params)


def run_all(cfg: PipelineConfig) -> MetricsReport:
    run_convert(cfg)
    run_subtract(cfg)
    run_slice(cfg)
    run_split(cfg)
    run_predict(cfg)
    run_fuse(cfg)
    for stream in STREAMS:
        run_evaluate(cfg, stream)
    return run_evaluate(cfg, "fused")
