"""Pipeline configuration: a flat ``key = value`` file with dotted keys.

Example::

    # paths are relative to this file
    dataset_root = data/brats
    output_root = runs/sub
    seed = 42
    split.test = 0.10
    segmenter.min_area = 20
    fusion.kind = max_score
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from subseg.dataset import WHOLE_TUMOR, _check_ratios
from subseg.ensemble import FUSION_KINDS, FusionStrategy
from subseg.errors import ConfigError, ValidationError
from subseg.segmenter import SegmenterParams

SOURCES = ("subtraction", "raw")
SUBSETS = ("train", "val", "test", "all")


@dataclass
class PipelineConfig:
    dataset_root: Path | None = None
    output_root: Path = Path("subseg_out")
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.81, 0.09, 0.10)
    group_by_case: bool = False
    positive_labels: frozenset[int] = WHOLE_TUMOR
    lo_pct: float = 1.0
    hi_pct: float = 99.0
    source: str = "subtraction"
    skip_empty: bool = False
    segmenter: SegmenterParams = field(default_factory=SegmenterParams)
    fusion: FusionStrategy = field(default_factory=FusionStrategy)
    skip_empty_gt: bool = False
    predict_subset: str = "test"
    threads: int = 0
    phantom_cases: int = 20

    def validate(self):
        try:
            _check_ratios(self.split_ratios)
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 <= self.lo_pct < self.hi_pct <= 100:
            raise ConfigError("need 0 <= normalize.lo_pct < normalize.hi_pct <= 100")
        if self.source not in SOURCES:
            raise ConfigError(f"streams.source must be one of {SOURCES}")
        if self.predict_subset not in SUBSETS:
            raise ConfigError(f"predict.subset must be one of {SUBSETS}")
        if self.threads < 0:
            raise ConfigError("threads must be >= 0")
        if not self.positive_labels:
            raise ConfigError("labels.positive must not be empty")
        if self.phantom_cases < 1:
            raise ConfigError("phantom.cases must be >= 1")
        return self

    def fingerprint(self) -> str:
        """Settings that determine results; thread count and paths are excluded."""
        s, f = self.segmenter, self.fusion
        parts = [
            f"source={self.source}",
            f"labels={'+'.join(str(c) for c in sorted(self.positive_labels))}",
            f"norm={self.lo_pct:g}-{self.hi_pct:g}",
            f"split={'/'.join(f'{r:g}' for r in self.split_ratios)}"
            + ("/case" if self.group_by_case else "/slice"),
            f"seed={self.seed}",
            f"subset={self.predict_subset}",
            f"skip_empty={int(self.skip_empty)}",
            f"seg={s.threshold_mode}/{s.percentile:g}/{s.min_area}/{s.connectivity}/{s.max_instances}/{s.nms_iou:g}",
            f"fusion={f.kind}/{f.vote_threshold:g}",
            f"skip_empty_gt={int(self.skip_empty_gt)}",
        ]
        return ";".join(parts)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _labels(text: str) -> frozenset[int]:
    return frozenset(int(p) for p in text.replace("+", ",").split(",") if p.strip())


# key -> (parser, setter)
def _set_attr(name):
    def setter(cfg, value, _):
        setattr(cfg, name, value)
    return setter


def _set_path(name):
    def setter(cfg, value, base):
        path = Path(value).expanduser()
        setattr(cfg, name, path if path.is_absolute() else (base / path).resolve())
    return setter


def _set_ratio(index):
    def setter(cfg, value, _):
        ratios = list(cfg.split_ratios)
        ratios[index] = value
        cfg.split_ratios = tuple(ratios)
    return setter


def _set_nested(group, name):
    def setter(cfg, value, _):
        setattr(cfg, group, dataclasses.replace(getattr(cfg, group), **{name: value}))
    return setter


def _fusion_kind(text):
    if text not in FUSION_KINDS:
        raise ValueError(f"expected one of {FUSION_KINDS}")
    return text


KEYS = {
    "dataset_root": (str, _set_path("dataset_root")),
    "output_root": (str, _set_path("output_root")),
    "seed": (int, _set_attr("seed")),
    "threads": (int, _set_attr("threads")),
    "split.train": (float, _set_ratio(0)),
    "split.val": (float, _set_ratio(1)),
    "split.test": (float, _set_ratio(2)),
    "split.group_by_case": (_bool, _set_attr("group_by_case")),
    "labels.positive": (_labels, _set_attr("positive_labels")),
    "normalize.lo_pct": (float, _set_attr("lo_pct")),
    "normalize.hi_pct": (float, _set_attr("hi_pct")),
    "streams.source": (str, _set_attr("source")),
    "slice.skip_empty": (_bool, _set_attr("skip_empty")),
    "segmenter.threshold_mode": (str, _set_nested("segmenter", "threshold_mode")),
    "segmenter.percentile": (float, _set_nested("segmenter", "percentile")),
    "segmenter.min_area": (int, _set_nested("segmenter", "min_area")),
    "segmenter.connectivity": (int, _set_nested("segmenter", "connectivity")),
    "segmenter.max_instances": (int, _set_nested("segmenter", "max_instances")),
    "segmenter.nms_iou": (float, _set_nested("segmenter", "nms_iou")),
    "fusion.kind": (_fusion_kind, _set_nested("fusion", "kind")),
    "fusion.vote_threshold": (float, _set_nested("fusion", "vote_threshold")),
    "metrics.skip_empty_gt": (_bool, _set_attr("skip_empty_gt")),
    "predict.subset": (str, _set_attr("predict_subset")),
    "phantom.cases": (int, _set_attr("phantom_cases")),
}


def parse_config_text(text: str, base_dir=Path(".")) -> PipelineConfig:
    cfg = PipelineConfig()
    base_dir = Path(base_dir)
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        parse, setter = KEYS[key]
        try:
            setter(cfg, parse(value), base_dir)
        except ValidationError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return cfg.validate()


def parse_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    return parse_config_text(text, path.parent.resolve())
