"""2D sample construction, deterministic splits and geometric augmentation."""
from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from subseg._atomic import atomic_write_text
from subseg.errors import DomainError, EmptySplitError, ParseError, ShapeError, ValidationError
from subseg.kernels import bilinear_sample
from subseg.volume_io import Modality, Volume

WHOLE_TUMOR = frozenset({1, 2, 4})
ENHANCING_TUMOR = frozenset({4})
SPLIT_HEADER = "SUBSEGSPLIT v1"
_U64 = (1 << 64) - 1


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


@dataclass(eq=False)
class SliceSample:
    case_id: str
    slice_index: int
    stream_id: str
    image: np.ndarray
    gt_mask: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.gt_mask = np.asarray(self.gt_mask).astype(np.uint8)
        if self.image.shape != self.gt_mask.shape:
            raise ShapeError(f"image {self.image.shape} vs mask {self.gt_mask.shape}")
        if self.gt_mask.max(initial=0) > 1:
            raise DomainError("gt_mask must be binary")

    @property
    def key(self) -> tuple[str, int]:
        return (self.case_id, self.slice_index)


def binarize_labels(label: Volume, positive_set: Iterable[int] = WHOLE_TUMOR) -> Volume:
    """1 where the label code is in ``positive_set``, else 0."""
    codes = np.rint(label.data).astype(np.int64)
    mask = np.isin(codes, np.fromiter(positive_set, dtype=np.int64))
    return Volume(mask.astype(np.float32), Modality.LABEL, label.case_id)


def slice_volume(stream: Volume, label: Volume, stream_id="t1", skip_empty=False) -> list[SliceSample]:
    """Split a stream and its binary label into per-depth 2D samples."""
    if stream.dims != label.dims:
        raise ShapeError(f"stream dims {stream.dims} != label dims {label.dims}")
    lab = label.data
    if not np.isin(lab, (0.0, 1.0)).all():
        raise DomainError("label volume must be binary; run binarize_labels first")
    case_id = stream.case_id or label.case_id
    samples = []
    for z in range(stream.depth):
        mask = lab[z]
        if skip_empty and not mask.any():
            continue
        samples.append(SliceSample(case_id, z, stream_id, stream.data[z].copy(), mask))
    return samples


@dataclass
class SplitSpec:
    seed: int
    assignments: dict[tuple[str, int], Split] = field(default_factory=dict)

    def keys(self, split: Split) -> list[tuple[str, int]]:
        return sorted(k for k, v in self.assignments.items() if v == split)

    def sizes(self) -> dict[Split, int]:
        out = {s: 0 for s in Split}
        for v in self.assignments.values():
            out[v] += 1
        return out


def _check_ratios(ratios):
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValidationError(f"ratios must be three non-negative numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"split ratios must sum to 1, got {sum(ratios)!r}")


def _split_sizes(n: int, ratios) -> tuple[int, int, int]:
    train, val, test = ratios
    # epsilon absorbs representation error, e.g. 10 * 0.1 -> 0.9999999999999999
    n_test = math.floor(n * test + 1e-9)
    remaining = n - n_test
    val_share = val / (train + val) if train + val > 0 else 0.0
    n_val = math.floor(remaining * val_share + 1e-9)
    return remaining - n_val, n_val, n_test


def split_dataset(sample_keys: Sequence[tuple[str, int]], ratios=(0.81, 0.09, 0.10), seed=0, group_by_case=False) -> SplitSpec:
    """Deterministic train/val/test partition.

    Keys are sorted, then permuted with a generator seeded by ``seed``. TEST
    takes ``floor(n * test)`` of the permutation, VAL takes ``floor(rest *
    val / (train + val))``, TRAIN keeps the remainder. With ``group_by_case``
    the same rule is applied to case ids and every slice follows its case.
    """
    _check_ratios(ratios)
    keys = sorted({(str(c), int(s)) for c, s in sample_keys})
    if not keys:
        raise EmptySplitError("cannot split an empty key list")
    rng = np.random.Generator(np.random.PCG64(int(seed) & _U64))
    units = sorted({k[0] for k in keys}) if group_by_case else keys
    order = rng.permutation(len(units))
    n_train, n_val, n_test = _split_sizes(len(units), ratios)
    unit_split = {}
    for pos, idx in enumerate(order):
        if pos < n_test:
            unit_split[units[idx]] = Split.TEST
        elif pos < n_test + n_val:
            unit_split[units[idx]] = Split.VAL
        else:
            unit_split[units[idx]] = Split.TRAIN
    if group_by_case:
        assignments = {k: unit_split[k[0]] for k in keys}
    else:
        assignments = {k: unit_split[k] for k in keys}
    return SplitSpec(int(seed), assignments)


def split_manifest_text(spec: SplitSpec) -> str:
    lines = [f"{SPLIT_HEADER} seed={spec.seed}"]
    for (case_id, idx), split in sorted(spec.assignments.items()):
        lines.append(f"{case_id},{idx},{split.value}")
    return "\n".join(lines) + "\n"


def write_split_manifest(spec: SplitSpec, path) -> None:
    atomic_write_text(path, split_manifest_text(spec))


def read_split_manifest(path) -> SplitSpec:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(SPLIT_HEADER + " seed="):
        raise ParseError("missing SUBSEGSPLIT header", 1)
    try:
        seed = int(lines[0].split("seed=", 1)[1])
    except ValueError as exc:
        raise ParseError("bad seed in header", 1) from exc
    assignments = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            case_id, idx, split = parts[0], int(parts[1]), Split(parts[2])
            if len(parts) != 3:
                raise ValueError
        except (IndexError, ValueError) as exc:
            raise ParseError(f"malformed split record {line!r}", lineno) from exc
        if (case_id, idx) in assignments:
            raise ParseError(f"duplicate key {(case_id, idx)}", lineno)
        assignments[(case_id, idx)] = split
    return SplitSpec(seed, assignments)


@dataclass(frozen=True)
class AugmentSpec:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rotation_range_deg: tuple[float, float] = (-45.0, 45.0)
    translate_frac: tuple[float, float] = (-0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        for p in (self.hflip_prob, self.vflip_prob):
            if not 0 <= p <= 1:
                raise ValidationError("flip probabilities must lie in [0, 1]")
        lo, hi = self.rotation_range_deg
        if not -180 <= lo <= hi <= 180:
            raise ValidationError("rotation range must lie within [-180, 180]")
        tlo, thi = self.translate_frac
        if not tlo <= thi:
            raise ValidationError("translate_frac must be an ordered pair")


@dataclass(frozen=True)
class AugmentDraw:
    """One concrete transform: flips, then rotation about the centre, then shift."""

    hflip: bool = False
    vflip: bool = False
    angle_deg: float = 0.0
    tx_frac: float = 0.0
    ty_frac: float = 0.0


def sample_rng(seed: int, case_id: str, slice_index: int, ordinal: int) -> np.random.Generator:
    """Counter-based generator keyed by the sample identity, not by call order."""
    material = f"{int(seed) & _U64}|{case_id}|{int(slice_index)}|{int(ordinal)}".encode()
    digest = hashlib.blake2b(material, digest_size=16).digest()
    key = np.frombuffer(digest, dtype="<u8").copy()
    return np.random.Generator(np.random.Philox(key=key))


def draw_augmentation(spec: AugmentSpec, case_id: str, slice_index: int, ordinal: int) -> AugmentDraw:
    rng = sample_rng(spec.seed, case_id, slice_index, ordinal)
    u = rng.random(5)  # fixed draw count keeps the stream layout stable
    lo, hi = spec.rotation_range_deg
    tlo, thi = spec.translate_frac
    return AugmentDraw(
        hflip=bool(u[0] < spec.hflip_prob),
        vflip=bool(u[1] < spec.vflip_prob),
        angle_deg=float(lo + (hi - lo) * u[2]),
        tx_frac=float(tlo + (thi - tlo) * u[3]),
        ty_frac=float(tlo + (thi - tlo) * u[4]),
    )


def _snap(a: np.ndarray) -> np.ndarray:
    r = np.round(a)
    return np.where(np.abs(a - r) < 1e-9, r, a)


def source_coords(draw: AugmentDraw, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """For every output pixel, the input coordinate it samples.

    Positive angles rotate counter-clockwise as displayed (rows down), so a
    +90 degree draw on a square image matches ``np.rot90``.
    """
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    dx = xx - draw.tx_frac * width - cx
    dy = yy - draw.ty_frac * height - cy
    theta = math.radians(draw.angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    sx = c * dx - s * dy + cx
    sy = s * dx + c * dy + cy
    if draw.hflip:
        sx = (width - 1) - sx
    if draw.vflip:
        sy = (height - 1) - sy
    return _snap(sx), _snap(sy)


def apply_augmentation(sample: SliceSample, draw: AugmentDraw) -> SliceSample:
    h, w = sample.image.shape
    sx, sy = source_coords(draw, h, w)
    image = bilinear_sample(sample.image, sx, sy)
    ix = np.floor(sx + 0.5).astype(np.intp)
    iy = np.floor(sy + 0.5).astype(np.intp)
    inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[inside] = sample.gt_mask[iy[inside], ix[inside]]
    return SliceSample(
        sample.case_id,
        sample.slice_index,
        sample.stream_id,
        np.clip(image, 0.0, 1.0).astype(np.float32),
        mask,
    )


def augment_sample(sample: SliceSample, spec: AugmentSpec, sample_ordinal=0) -> SliceSample:
    draw = draw_augmentation(spec, sample.case_id, sample.slice_index, sample_ordinal)
    return apply_augmentation(sample, draw)
