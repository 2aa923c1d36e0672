"""Numeric kernels from the instance-segmentation inference path.

Coordinate conventions
----------------------
Boxes are continuous ``(x0, y0, x1, y1)`` in *pixel-area* coordinates: pixel
``(row, col)`` covers ``[col, col+1) x [row, row+1)`` and its centre sits at
``(col + 0.5, row + 0.5)``. A component spanning columns 10..14 therefore has
``x0 = 10, x1 = 15``.

``roi_align`` samples a feature grid whose cells are point samples at
integer coordinates; bilinear samples outside ``[0, W-1] x [0, H-1]``
contribute 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage


class Box(NamedTuple):
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def area(self) -> float:
        return max(self.x1 - self.x0, 0.0) * max(self.y1 - self.y0, 0.0)

    def is_valid(self) -> bool:
        return self.x0 <= self.x1 and self.y0 <= self.y1


@dataclass(eq=False)
class Instance:
    """One predicted object.

    ``mask`` is either a soft grid of floats in [0, 1] (typically 28x28, in
    box-relative coordinates) or a full-resolution binary grid (bool/uint8).
    """

    box: Box
    score: float
    mask: np.ndarray

    def __post_init__(self):
        self.box = Box(*(float(v) for v in self.box))
        self.score = float(self.score)

    @property
    def is_soft(self) -> bool:
        return np.asarray(self.mask).dtype.kind == "f"

    def full_mask(self, height: int, width: int, threshold=0.5) -> np.ndarray:
        if self.is_soft:
            return paste_mask(self.mask, self.box, height, width, threshold)
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != (height, width):
            raise ValueError(f"binary mask shape {mask.shape} != {(height, width)}")
        return mask

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        a, b = np.asarray(self.mask), np.asarray(other.mask)
        return (
            self.box == other.box
            and self.score == other.score
            and a.shape == b.shape
            and bool(np.array_equal(a, b))
        )


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0:
        return 0.0
    return inter / union


def _iou_row(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    # same expression order as iou() so scalar and vector results agree bit-for-bit
    iw = np.minimum(box[2], others[:, 2]) - np.maximum(box[0], others[:, 0])
    ih = np.minimum(box[3], others[:, 3]) - np.maximum(box[1], others[:, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    union = (
        (box[2] - box[0]) * (box[3] - box[1])
        + (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
        - inter
    )
    out = np.zeros_like(inter)
    ok = union > 0
    out[ok] = inter[ok] / union[ok]
    return out


def nms(instances: Sequence[Instance], iou_threshold=0.5, max_instances=None) -> list[Instance]:
    """Greedy non-maximum suppression.

    Candidates are visited by descending score (ties: lower input index
    first). A candidate is kept iff its IoU with every already-kept instance
    is ``<= iou_threshold``. ``max_instances`` truncates the kept list.
    """
    if not instances:
        return []
    scores = np.array([inst.score for inst in instances], dtype=np.float64)
    boxes = np.array([inst.box for inst in instances], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for idx in order:
        if kept and (_iou_row(boxes[idx], boxes[kept]) > iou_threshold).any():
            continue
        kept.append(int(idx))
        if max_instances is not None and len(kept) >= max_instances:
            break
    return [instances[i] for i in kept]


def bilinear_sample(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup at continuous ``(x, y)``; points off ``[0,W-1]x[0,H-1]`` give 0."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    x = np.where(inside, xs, 0.0)
    y = np.where(inside, ys, 0.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    # lerp form: equal corners give that value back exactly
    top = grid[y0, x0] + (grid[y0, x1] - grid[y0, x0]) * fx
    bottom = grid[y1, x0] + (grid[y1, x1] - grid[y1, x0]) * fx
    val = top + (bottom - top) * fy
    return np.where(inside, val, 0.0)


def roi_align(feature: np.ndarray, box: Box, out_h: int, out_w: int, samples_per_bin=2) -> np.ndarray:
    """Pool ``feature`` over a continuous box into an ``out_h x out_w`` grid.

    Each bin averages ``samples_per_bin**2`` bilinear samples placed at the
    centres of a regular sub-grid; no coordinate is quantized.
    """
    if out_h < 1 or out_w < 1 or samples_per_bin < 1:
        raise ValueError("out_h, out_w and samples_per_bin must be >= 1")
    x0, y0, x1, y1 = (float(v) for v in box)
    s = samples_per_bin
    bin_w = (x1 - x0) / out_w
    bin_h = (y1 - y0) / out_h
    offsets = (np.arange(s) + 0.5) / s
    xs = x0 + (np.arange(out_w)[:, None] + offsets[None, :]) * bin_w  # (out_w, s)
    ys = y0 + (np.arange(out_h)[:, None] + offsets[None, :]) * bin_h  # (out_h, s)
    gx = np.broadcast_to(xs[None, None, :, :], (out_h, s, out_w, s))
    gy = np.broadcast_to(ys[:, :, None, None], (out_h, s, out_w, s))
    vals = bilinear_sample(feature, gx, gy)
    # average deviations from one sample so constant bins come back exact
    ref = vals[:, :1, :, :1]
    return ref[:, 0, :, 0] + (vals - ref).mean(axis=(1, 3))


def paste_mask(soft_mask: np.ndarray, box: Box, height: int, width: int, threshold=0.5) -> np.ndarray:
    """Resize a box-relative soft mask onto a ``height x width`` image and binarize.

    A pixel is inside the box when its centre is in ``[x0, x1) x [y0, y1)``.
    Inside pixels sample the soft mask bilinearly (mask cells are centred at
    half-integer box-relative positions, edges clamp); the result is ``>=
    threshold``. Pixels outside the box or the image are 0.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    soft = np.asarray(soft_mask, dtype=np.float64)
    mh, mw = soft.shape
    out = np.zeros((height, width), dtype=bool)
    x0, y0, x1, y1 = (float(v) for v in box)
    if x1 <= x0 or y1 <= y0:
        return out
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    col_in = (cols >= x0) & (cols < x1)
    row_in = (rows >= y0) & (rows < y1)
    if not col_in.any() or not row_in.any():
        return out
    c_idx = np.nonzero(col_in)[0]
    r_idx = np.nonzero(row_in)[0]
    u = np.clip((cols[c_idx] - x0) / (x1 - x0) * mw - 0.5, 0, mw - 1)
    v = np.clip((rows[r_idx] - y0) / (y1 - y0) * mh - 0.5, 0, mh - 1)
    uu, vv = np.meshgrid(u, v)
    vals = bilinear_sample(soft, uu, vv)
    out[np.ix_(r_idx, c_idx)] = vals >= threshold
    return out


class Component(NamedTuple):
    mask: np.ndarray
    area: int
    box: Box


_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def connected_components(grid: np.ndarray, connectivity=8) -> list[Component]:
    """Maximal connected foreground sets, ordered by (min row, min col)."""
    if connectivity not in _STRUCTURES:
        raise ValueError("connectivity must be 4 or 8")
    grid = np.asarray(grid).astype(bool)
    labels, n = ndimage.label(grid, structure=_STRUCTURES[connectivity])
    comps = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        mask = labels == lab
        rs, cs = sl
        area = int(np.count_nonzero(mask[sl]))
        box = Box(float(cs.start), float(rs.start), float(cs.stop), float(rs.stop))
        # scipy numbers labels in raster order of first pixel; keep that as tie-break
        comps.append(((rs.start, cs.start, lab), Component(mask, area, box)))
    comps.sort(key=lambda item: item[0])
    return [c for _, c in comps]


def select_top_instance(instances: Sequence[Instance]) -> Instance | None:
    """Highest-scoring instance; lowest input index wins ties."""
    best = None
    for inst in instances:
        if best is None or inst.score > best.score:
            best = inst
    return best
