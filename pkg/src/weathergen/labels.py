"""Pixel statistics over reference label maps and the thing-class share.

Label maps are single-channel 8-bit PNGs whose pixel values are class IDs.
Counts are plain Python integers so tallies merged from several files (or
threads) are exact and order-independent.
"""
from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType

import numpy as np
from PIL import Image

from .errors import (
    DegenerateDistribution,
    EmptyInput,
    FormatError,
    ParseError,
    ValidationError,
)

log = logging.getLogger(__name__)

DEFAULT_SMOOTHING = 1


@dataclass(frozen=True)
class ClassInfo:
    class_id: int
    name: str
    is_thing: bool


@dataclass(frozen=True)
class ClassConfig:
    classes: tuple[ClassInfo, ...]
    ignore_id: int = 255

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        ids = [c.class_id for c in self.classes]
        names = [c.name for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ValidationError("class ids must be unique")
        if len(set(names)) != len(names):
            raise ValidationError("class names must be unique")
        for c in self.classes:
            if not (0 <= c.class_id <= 255):
                raise ValidationError(f"class id {c.class_id} outside 0..255")
            if not c.name:
                raise ValidationError(f"class id {c.class_id} has an empty name")
        if not any(c.is_thing for c in self.classes):
            raise ValidationError("at least one class must be a thing class")
        if self.ignore_id in ids:
            raise ValidationError(f"ignore_id {self.ignore_id} is also a class id")

    @property
    def things(self) -> tuple[ClassInfo, ...]:
        return tuple(c for c in self.classes if c.is_thing)

    def by_name(self, name: str) -> ClassInfo:
        for c in self.classes:
            if c.name == name:
                return c
        raise ValidationError(f"unknown class name {name!r}")

    def by_id(self, class_id: int) -> ClassInfo:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise ValidationError(f"unknown class id {class_id}")

    def to_dict(self) -> dict:
        return {
            "ignore_id": self.ignore_id,
            "classes": [
                {"id": c.class_id, "name": c.name, "is_thing": c.is_thing}
                for c in self.classes
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> ClassConfig:
        try:
            classes = [
                ClassInfo(int(c["id"]), str(c["name"]), bool(c["is_thing"]))
                for c in doc["classes"]
            ]
            ignore_id = int(doc.get("ignore_id", 255))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad class config: {exc!r}") from exc
        return cls(tuple(classes), ignore_id)


def load_class_config(path: str | Path) -> ClassConfig:
    """Read a class config document (``{"ignore_id", "classes": [{id, name, is_thing}]}``)."""
    return ClassConfig.from_dict(_read_json(Path(path)))


def default_class_config() -> ClassConfig:
    """The 19-class Cityscapes evaluation taxonomy with its 10 thing classes."""
    text = resources.files("weathergen.data").joinpath("cityscapes.json").read_text("utf-8")
    return ClassConfig.from_dict(json.loads(text))


@dataclass(frozen=True)
class PixelCounts:
    counts: Mapping[int, int]
    total_pixels: int
    files_scanned: int = 0
    # (path, message) for files that could not be read
    errors: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        counts = {int(k): int(v) for k, v in dict(self.counts).items()}
        if any(v < 0 for v in counts.values()):
            raise ValidationError("pixel counts must be non-negative")
        if sum(counts.values()) > self.total_pixels:
            raise ValidationError("sum of class counts exceeds total_pixels")
        object.__setattr__(self, "counts", MappingProxyType(dict(sorted(counts.items()))))

    def __add__(self, other: PixelCounts) -> PixelCounts:
        merged = dict(self.counts)
        for k, v in other.counts.items():
            merged[k] = merged.get(k, 0) + v
        return PixelCounts(
            merged,
            self.total_pixels + other.total_pixels,
            self.files_scanned + other.files_scanned,
            self.errors + other.errors,
        )


@dataclass(frozen=True)
class ClassDistribution:
    shares: Mapping[int, float]
    thing_total: int
    smoothing: int = 0
    names: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "shares", MappingProxyType(dict(self.shares)))
        object.__setattr__(self, "names", MappingProxyType(dict(self.names)))

    @property
    def digest(self) -> str:
        payload = json.dumps(
            [[k, self.names.get(k, ""), repr(v)] for k, v in self.shares.items()]
            + [self.thing_total, self.smoothing]
        )
        return hashlib.sha256(payload.encode()).hexdigest()


def _count_file(path: Path, cfg: ClassConfig) -> PixelCounts:
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise FormatError(f"{path}: expected a single-channel 8-bit image, got mode {img.mode}")
        arr = np.asarray(img)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise FormatError(f"{path}: expected a 2-D uint8 array, got {arr.shape} {arr.dtype}")
    hist = np.bincount(arr.ravel(), minlength=256)
    counts = {c.class_id: int(hist[c.class_id]) for c in cfg.classes}
    return PixelCounts(counts, int(arr.size), 1)


def scan_label_maps(
    directory: str | Path,
    cfg: ClassConfig,
    pattern: str = "*.png",
    workers: int = 1,
) -> PixelCounts:
    """Tally per-class pixel counts over every label map under ``directory``.

    Pixels equal to ``cfg.ignore_id`` or to IDs not in ``cfg`` count towards
    ``total_pixels`` only. Files that fail to decode are recorded in
    ``errors``; the scan fails only when no file could be read.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise EmptyInput(f"{directory}: not a directory")
    files = sorted(p for p in directory.rglob(pattern) if p.is_file())
    if not files:
        raise EmptyInput(f"{directory}: no files matching {pattern!r}")

    def one(path: Path) -> PixelCounts:
        try:
            return _count_file(path, cfg)
        except FormatError as exc:
            return PixelCounts({}, 0, 0, ((str(path), str(exc)),))
        except (OSError, ValueError) as exc:
            return PixelCounts({}, 0, 0, ((str(path), f"unreadable: {exc}"),))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(one, files))
    else:
        parts = [one(p) for p in files]

    total = PixelCounts({c.class_id: 0 for c in cfg.classes}, 0, 0)
    for part in parts:
        total = total + part
    for path, msg in total.errors:
        log.warning("skipped %s: %s", path, msg)
    if total.files_scanned == 0:
        raise FormatError(f"{directory}: all {len(files)} files failed: {total.errors[0][1]}")
    return total


def _read_json(path: Path):
    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from exc


def counts_from_dict(doc: Mapping, cfg: ClassConfig, where: str = "<counts>") -> PixelCounts:
    if not isinstance(doc, Mapping) or not isinstance(doc.get("counts"), Mapping):
        raise ParseError("expected an object with a 'counts' mapping", where)
    counts = {c.class_id: 0 for c in cfg.classes}
    for name, value in doc["counts"].items():
        try:
            info = cfg.by_name(name)
        except ValidationError:
            raise ValidationError(f"{where}: class {name!r} is not in the class config") from None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{where}: count for {name!r} must be an integer, got {value!r}")
        if value < 0:
            raise ValidationError(f"{where}: negative count {value} for {name!r}")
        counts[info.class_id] = value
    total = doc.get("total_pixels", sum(counts.values()))
    if isinstance(total, bool) or not isinstance(total, int) or total < 0:
        raise ValidationError(f"{where}: total_pixels must be a non-negative integer")
    return PixelCounts(counts, total, 0)


def load_counts(path: str | Path, cfg: ClassConfig) -> PixelCounts:
    """Read a counts document: ``{"counts": {name: int, ...}, "total_pixels": int?}``."""
    path = Path(path)
    return counts_from_dict(_read_json(path), cfg, str(path))


def thing_distribution(
    counts: PixelCounts, cfg: ClassConfig, smoothing: int = DEFAULT_SMOOTHING
) -> ClassDistribution:
    """Share of thing-class pixels per thing class, with additive smoothing.

    ``E_i = (D_i + s) / sum_j (D_j + s)`` over thing classes only; stuff
    classes never enter the denominator.
    """
    if isinstance(smoothing, bool) or not isinstance(smoothing, int) or smoothing < 0:
        raise ValidationError(f"smoothing must be a non-negative integer, got {smoothing!r}")
    things = cfg.things
    smoothed = {c.class_id: counts.counts.get(c.class_id, 0) + smoothing for c in things}
    total = sum(smoothed.values())
    if total == 0:
        raise DegenerateDistribution("all thing-class counts are zero; use smoothing > 0")
    # int / int is correctly rounded, even past 2**53
    shares = {k: v / total for k, v in smoothed.items()}
    if any(v <= 0 for v in shares.values()):
        zero = [cfg.by_id(k).name for k, v in shares.items() if v <= 0]
        log.warning("thing classes with zero share: %s", ", ".join(zero))
    return ClassDistribution(shares, total, smoothing, {c.class_id: c.name for c in things})
