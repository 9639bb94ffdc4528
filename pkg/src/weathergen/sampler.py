"""Inverse-frequency class sampling and weather/time balanced generation plans."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from bisect import bisect_right
from collections import Counter
from dataclasses import dataclass
from itertools import accumulate, product
from pathlib import Path

import numpy as np

from .errors import DegenerateDistribution, ParseError, ValidationError
from .labels import ClassDistribution

log = logging.getLogger(__name__)

DEFAULT_WEATHERS = ("snowy", "rainy", "foggy")
DEFAULT_TIMES = ("daytime", "nighttime")

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer; a bijection on 64-bit integers."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Per-item seed: ``splitmix64(master_seed + (index + 1) * GOLDEN_GAMMA mod 2**64)``.

    The gamma is odd, so distinct indices below 2**64 map to distinct inputs,
    and the finalizer is a bijection, so derived seeds within one plan never
    collide.
    """
    return splitmix64(master_seed + (index + 1) * GOLDEN_GAMMA)


@dataclass(frozen=True)
class SamplingTable:
    class_ids: tuple[int, ...]
    names: tuple[str, ...]
    probs: tuple[float, ...]
    seed_note: str = ""
    # sum_j 1/E_j, the constant the probabilities were divided by
    normalizer: float = 1.0

    def __post_init__(self):
        n = len(self.class_ids)
        if n == 0 or len(self.names) != n or len(self.probs) != n:
            raise ValidationError("sampling table needs matching, non-empty ids/names/probs")
        if any(not (p > 0) for p in self.probs):
            raise ValidationError("sampling probabilities must be strictly positive")
        if abs(math.fsum(self.probs) - 1.0) > 1e-12:
            raise ValidationError(f"sampling probabilities sum to {math.fsum(self.probs)!r}")

    def __len__(self):
        return len(self.class_ids)

    def items(self):
        return zip(self.class_ids, self.names, self.probs)

    def prob_of(self, name: str) -> float:
        return self.probs[self.names.index(name)]

    @property
    def digest(self) -> str:
        rows = [[i, n, repr(p)] for i, n, p in self.items()]
        payload = json.dumps({"rows": rows, "seed_note": self.seed_note}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def cumulative(self) -> list[float]:
        return list(accumulate(self.probs))

    def to_dict(self) -> dict:
        return {
            "digest": self.digest,
            "seed_note": self.seed_note,
            "normalizer": self.normalizer,
            "classes": [
                {"id": i, "name": n, "prob": p} for i, n, p in self.items()
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict, where: str = "<table>") -> SamplingTable:
        try:
            rows = doc["classes"]
            table = cls(
                tuple(int(r["id"]) for r in rows),
                tuple(str(r["name"]) for r in rows),
                tuple(float(r["prob"]) for r in rows),
                str(doc.get("seed_note", "")),
                float(doc.get("normalizer", 1.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad sampling table: {exc}", where) from exc
        if "digest" in doc and doc["digest"] != table.digest:
            raise ValidationError(f"{where}: stored digest does not match table contents")
        return table


def write_table(table: SamplingTable, path: str | Path, extra: dict | None = None) -> None:
    doc = table.to_dict()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_table(path: str | Path) -> SamplingTable:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from exc
    return SamplingTable.from_dict(doc, str(path))


def sampling_probabilities(dist: ClassDistribution) -> SamplingTable:
    """Normalized inverse-share probabilities, ``P_i = (1/E_i) / sum_j (1/E_j)``.

    Rarer classes get proportionally more weight. Classes keep the order they
    have in ``dist`` (the class config order).
    """
    ids = tuple(dist.shares)
    shares = [dist.shares[k] for k in ids]
    if not shares or any(not (e > 0) for e in shares):
        raise DegenerateDistribution("every class share must be > 0 to invert it")
    inverse = [1.0 / e for e in shares]
    normalizer = math.fsum(inverse)
    probs = tuple(v / normalizer for v in inverse)
    log.debug(
        "inverse-share normalizer %r (unnormalized scale 1/sum(E) = %r)",
        normalizer, 1.0 / math.fsum(shares),
    )
    names = tuple(dist.names.get(k, str(k)) for k in ids)
    return SamplingTable(ids, names, probs, dist.digest, normalizer)


def sample_class(table: SamplingTable, rng: np.random.Generator, _cum=None) -> int:
    """Draw one class id with probability ``P_i``; consumes exactly one uniform from ``rng``."""
    cum = _cum if _cum is not None else table.cumulative()
    u = rng.random()
    # guard u landing past a cumulative total that rounded below 1
    return table.class_ids[min(bisect_right(cum, u), len(cum) - 1)]


@dataclass(frozen=True)
class ConditionGrid:
    weathers: tuple[str, ...] = DEFAULT_WEATHERS
    times: tuple[str, ...] = DEFAULT_TIMES

    def __post_init__(self):
        object.__setattr__(self, "weathers", tuple(self.weathers))
        object.__setattr__(self, "times", tuple(self.times))
        for label, values in (("weathers", self.weathers), ("times", self.times)):
            if not values:
                raise ValidationError(f"{label} must not be empty")
            if len(set(values)) != len(values):
                raise ValidationError(f"{label} must be unique: {values}")
            for v in values:
                if not v or any(ch in v for ch in "\t\n,") or v != v.strip():
                    raise ValidationError(f"bad {label[:-1]} label {v!r}")

    @property
    def cells(self) -> list[tuple[str, str]]:
        return list(product(self.weathers, self.times))


@dataclass(frozen=True)
class PlanItem:
    index: int
    class_id: int
    class_name: str
    weather: str
    time: str
    derived_seed: int

    @property
    def cell(self) -> tuple[str, str]:
        return (self.weather, self.time)


@dataclass(frozen=True)
class GenerationPlan:
    items: tuple[PlanItem, ...]
    master_seed: int
    table_digest: str
    grid: ConditionGrid = ConditionGrid()

    def __len__(self):
        return len(self.items)

    def cell_counts(self) -> dict[tuple[str, str], int]:
        counts = Counter(item.cell for item in self.items)
        return {cell: counts.get(cell, 0) for cell in self.grid.cells}

    def class_counts(self) -> Counter:
        return Counter(item.class_name for item in self.items)

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write(
            f"#plan\tmaster_seed={self.master_seed}\ttable_digest={self.table_digest}"
            f"\tweathers={','.join(self.grid.weathers)}\ttimes={','.join(self.grid.times)}\n"
        )
        buf.write("index\tclass\tweather\ttime\tderived_seed\n")
        for it in self.items:
            buf.write(f"{it.index}\t{it.class_name}\t{it.weather}\t{it.time}\t{it.derived_seed}\n")
        return buf.getvalue()

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_tsv().encode("utf-8")).hexdigest()


def make_plan(
    table: SamplingTable,
    grid: ConditionGrid,
    total: int,
    master_seed: int,
) -> GenerationPlan:
    """Build a plan of ``total`` items balanced over the grid's cells.

    Item ``i`` goes to cell ``i mod n_cells`` in lexicographic (weather, time)
    order, so cell sizes differ by at most one. Its class is one
    :func:`sample_class` draw from a generator seeded with the item's derived
    seed; any single item can be regenerated from ``(master_seed, index)``.
    """
    if isinstance(total, bool) or not isinstance(total, int) or total < 1:
        raise ValidationError(f"total must be a positive integer, got {total!r}")
    if not (0 <= master_seed <= MASK64):
        raise ValidationError("master_seed must fit in an unsigned 64-bit integer")
    cells = grid.cells
    cum = table.cumulative()
    name_of = dict(zip(table.class_ids, table.names))
    items = []
    for index in range(total):
        seed = derive_seed(master_seed, index)
        class_id = sample_class(table, np.random.default_rng(seed), cum)
        weather, time = cells[index % len(cells)]
        items.append(PlanItem(index, class_id, name_of[class_id], weather, time, seed))
    return GenerationPlan(tuple(items), master_seed, table.digest, grid)


def write_plan(plan: GenerationPlan, path: str | Path) -> None:
    Path(path).write_text(plan.to_tsv(), encoding="utf-8")


def read_plan(path: str | Path, table: SamplingTable | None = None) -> GenerationPlan:
    """Parse a plan file. Class ids are resolved through ``table`` when given."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#plan\t"):
        raise ParseError("missing '#plan' header record", f"{path}:1")
    header = {}
    for field in lines[0].split("\t")[1:]:
        key, sep, value = field.partition("=")
        if not sep:
            raise ParseError(f"bad header field {field!r}", f"{path}:1")
        header[key] = value
    try:
        master_seed = int(header["master_seed"])
        table_digest = header["table_digest"]
        grid = ConditionGrid(
            tuple(header["weathers"].split(",")), tuple(header["times"].split(","))
        )
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad header: {exc}", f"{path}:1") from exc
    if table is not None and table.digest != table_digest:
        raise ValidationError(f"{path}: plan was built from a different sampling table")
    ids = dict(zip(table.names, table.class_ids)) if table is not None else {}
    if len(lines) < 2 or lines[1] != "index\tclass\tweather\ttime\tderived_seed":
        raise ParseError("missing column header", f"{path}:2")
    items = []
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split("\t")
        if len(parts) != 5:
            raise ParseError(f"expected 5 fields, got {len(parts)}", f"{path}:{lineno}")
        try:
            index, seed = int(parts[0]), int(parts[4])
        except ValueError as exc:
            raise ParseError(str(exc), f"{path}:{lineno}") from exc
        if index != len(items):
            raise ParseError(f"index {index} out of sequence", f"{path}:{lineno}")
        name = parts[1]
        if table is not None and name not in ids:
            raise ValidationError(f"{path}:{lineno}: class {name!r} not in sampling table")
        items.append(PlanItem(index, ids.get(name, -1), name, parts[2], parts[3], seed))
    plan = GenerationPlan(tuple(items), master_seed, table_digest, grid)
    if plan.to_tsv() != "\n".join(lines) + "\n":
        raise ParseError("plan file is not in canonical form", str(path))
    return plan
