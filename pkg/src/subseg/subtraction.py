"""Enhanced-minus-base subtraction streams."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from subseg.errors import DomainError, MissingModalityError, ShapeError
from subseg.volume_io import Modality, Volume


class StreamId(str, enum.Enum):
    T1_STREAM = "t1"
    T2_STREAM = "t2"

    @property
    def enhanced(self) -> Modality:
        return Modality.T1GD if self is StreamId.T1_STREAM else Modality.FLAIR

    @property
    def base(self) -> Modality:
        return Modality.T1 if self is StreamId.T1_STREAM else Modality.T2


@dataclass
class CaseVolumes:
    case_id: str
    t1: Volume | None = None
    t1gd: Volume | None = None
    t2: Volume | None = None
    flair: Volume | None = None
    label: Volume | None = None

    def missing(self, required=("t1", "t1gd", "t2", "flair", "label")) -> list[str]:
        return [Modality[name.upper()].value for name in required if getattr(self, name) is None]

    def require(self, *names):
        missing = self.missing(names or ("t1", "t1gd", "t2", "flair", "label"))
        if missing:
            raise MissingModalityError(missing, self.case_id)
        present = [getattr(self, n) for n in ("t1", "t1gd", "t2", "flair", "label") if getattr(self, n) is not None]
        dims = {v.dims for v in present}
        if len(dims) > 1:
            raise ShapeError(f"case {self.case_id!r}: modality dims differ: {sorted(dims)}")

    def get(self, modality: Modality) -> Volume:
        vol = getattr(self, modality.value.lower())
        if vol is None:
            raise MissingModalityError([modality.value], self.case_id)
        return vol


@dataclass
class SubtractionStream:
    stream_id: StreamId
    volume: Volume


def subtract_volumes(enhanced: Volume, base: Volume) -> Volume:
    """Voxel-wise ``clamp(enhanced - base, 0, 1)`` on normalized volumes."""
    if enhanced.dims != base.dims:
        raise ShapeError(f"dimension mismatch: {enhanced.dims} vs {base.dims}")
    for vol in (enhanced, base):
        data = vol.data
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise DomainError(
                f"{vol.modality.value} volume is not normalized to [0, 1] "
                f"(range {data.min():g}..{data.max():g})"
            )
    diff = np.clip(enhanced.data - base.data, 0.0, 1.0)
    return Volume(diff, Modality.SUBTRACTION, enhanced.case_id or base.case_id)


def build_streams(case: CaseVolumes) -> tuple[SubtractionStream, SubtractionStream]:
    case.require("t1", "t1gd", "t2", "flair")
    return tuple(
        SubtractionStream(sid, subtract_volumes(case.get(sid.enhanced), case.get(sid.base)))
        for sid in (StreamId.T1_STREAM, StreamId.T2_STREAM)
    )


def raw_streams(case: CaseVolumes) -> tuple[SubtractionStream, SubtractionStream]:
    """The no-subtraction control: each stream is just its enhanced modality."""
    case.require("t1gd", "flair")
    return tuple(
        SubtractionStream(sid, case.get(sid.enhanced)) for sid in (StreamId.T1_STREAM, StreamId.T2_STREAM)
    )
