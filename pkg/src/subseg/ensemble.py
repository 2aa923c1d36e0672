"""Decision-level fusion of the T1 and T2 stream predictions for one slice."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from subseg.errors import FusionError, ValidationError
from subseg.kernels import Box, Instance, select_top_instance
from subseg.segmenter import PredictionSet

FUSION_KINDS = ("max_score", "mask_union", "score_weighted_vote")


@dataclass(frozen=True)
class FusionStrategy:
    kind: str = "max_score"
    vote_threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise ValidationError(f"unknown fusion kind {self.kind!r}")
        if not 0 < self.vote_threshold <= 1:
            raise ValidationError("vote_threshold must lie in (0, 1]")


def _common_shape(pred_t1: PredictionSet, pred_t2: PredictionSet, shape=None) -> tuple[int, int]:
    if pred_t1.key != pred_t2.key:
        raise FusionError(f"cannot fuse {pred_t1.key} with {pred_t2.key}")
    shapes = {tuple(p.shape) for p in (pred_t1, pred_t2) if p.instances}
    if shape is not None:
        shapes.add(tuple(shape))
    if len(shapes) > 1:
        raise FusionError(f"mask shapes differ for {pred_t1.key}: {sorted(shapes)}")
    if shapes:
        return shapes.pop()
    for p in (pred_t1, pred_t2):
        if tuple(p.shape) != (0, 0):
            return tuple(p.shape)
    raise FusionError(f"no mask shape known for {pred_t1.key}; pass shape explicitly")


def fuse(pred_t1: PredictionSet, pred_t2: PredictionSet, strategy: FusionStrategy = FusionStrategy(), shape=None) -> np.ndarray:
    """Combine two stream predictions into one binary mask.

    ``max_score`` keeps the single most confident instance across both
    streams (T1 wins exact ties). ``mask_union`` ORs each stream's top
    instance. ``score_weighted_vote`` keeps pixels whose covering score mass
    is at least ``vote_threshold`` of the total score mass.
    """
    h, w = _common_shape(pred_t1, pred_t2, shape)
    out = np.zeros((h, w), dtype=bool)
    if strategy.kind == "max_score":
        top = select_top_instance(list(pred_t1.instances) + list(pred_t2.instances))
        if top is not None:
            out = top.full_mask(h, w).copy()
    elif strategy.kind == "mask_union":
        for pred in (pred_t1, pred_t2):
            top = select_top_instance(pred.instances)
            if top is not None:
                out |= top.full_mask(h, w)
    else:
        votes = np.zeros((h, w), dtype=np.float64)
        total = 0.0
        for inst in list(pred_t1.instances) + list(pred_t2.instances):
            votes += inst.score * inst.full_mask(h, w)
            total += inst.score
        if total > 0:
            out = (votes / total >= strategy.vote_threshold) & (votes > 0)
    return out


def mask_bounds(mask: np.ndarray) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def fused_prediction(pred_t1: PredictionSet, pred_t2: PredictionSet, strategy: FusionStrategy = FusionStrategy(), shape=None) -> PredictionSet:
    """Fused mask packaged as a ``fused``-stream prediction (zero or one instance).

    The instance score is the best score among input instances overlapping
    the fused mask.
    """
    mask = fuse(pred_t1, pred_t2, strategy, shape)
    h, w = mask.shape
    instances = []
    if mask.any():
        score = max(
            (i.score for p in (pred_t1, pred_t2) for i in p.instances if (i.full_mask(h, w) & mask).any()),
            default=0.0,
        )
        instances.append(Instance(mask_bounds(mask), score, mask))
    return PredictionSet(pred_t1.case_id, pred_t1.slice_index, "fused", (h, w), instances)
