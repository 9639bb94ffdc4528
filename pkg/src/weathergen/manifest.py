"""Append-only JSON-lines manifest of generation attempts, and balance reports.

The first line is a header record binding the manifest to one plan (and the
sampling table behind it); every following line is one :class:`ManifestEntry`.
A torn final line left by a crash is dropped on read and truncated away the
next time the manifest is opened for writing.
"""
from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import DuplicateIndex, IoError, ParseError, RefusesResume, ValidationError
from .sampler import GenerationPlan, SamplingTable, read_plan, read_table

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SUCCEEDED = "succeeded"
FAILED = "failed"


@dataclass(frozen=True)
class ManifestEntry:
    index: int
    class_name: str
    weather: str
    time: str
    base_prompt: str
    enriched_prompt: str
    prompt_source: str
    seed: int
    status: str
    image_path: str | None = None
    image_digest: str | None = None
    error: str | None = None
    attempt_count: int = 1

    def __post_init__(self):
        if self.status not in (SUCCEEDED, FAILED):
            raise ValidationError(f"status must be succeeded or failed, got {self.status!r}")
        has_image = self.image_path is not None and self.image_digest is not None
        if (self.status == SUCCEEDED) != has_image:
            raise ValidationError(
                f"entry {self.index}: image_path/image_digest must be present exactly when succeeded"
            )
        if self.attempt_count < 1:
            raise ValidationError("attempt_count must be >= 1")
        if self.index < 0:
            raise ValidationError("index must be non-negative")

    @property
    def cell(self) -> tuple[str, str]:
        return (self.weather, self.time)

    def to_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> ManifestEntry:
        return cls(**doc)


@dataclass(frozen=True)
class ManifestHeader:
    plan_digest: str
    table_digest: str
    manifest_version: int = MANIFEST_VERSION

    def to_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True) + "\n"


@dataclass
class Manifest:
    header: ManifestHeader | None
    entries: list[ManifestEntry]
    dropped_tail: bool = False

    def by_index(self) -> dict[int, ManifestEntry]:
        return {e.index: e for e in self.entries}


def _parse_lines(path: Path, data: bytes) -> Manifest:
    body, _, tail = data.rpartition(b"\n")
    complete = body.split(b"\n") if body else []
    dropped = bool(tail)
    if dropped:
        log.warning("%s: dropping truncated final record (%d bytes)", path, len(tail))
    header = None
    entries: list[ManifestEntry] = []
    seen: set[int] = set()
    for lineno, raw in enumerate(complete, start=1):
        if not raw.strip():
            continue
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(str(exc), f"{path}:{lineno}") from exc
        if not isinstance(doc, dict):
            raise ParseError("record is not an object", f"{path}:{lineno}")
        if "manifest_version" in doc:
            if lineno != 1:
                raise ParseError("header record must be the first line", f"{path}:{lineno}")
            try:
                header = ManifestHeader(**doc)
            except TypeError as exc:
                raise ParseError(f"bad header: {exc}", f"{path}:{lineno}") from exc
            continue
        try:
            entry = ManifestEntry.from_dict(doc)
        except TypeError as exc:
            raise ParseError(f"bad entry: {exc}", f"{path}:{lineno}") from exc
        except ValidationError as exc:
            raise ParseError(str(exc), f"{path}:{lineno}") from exc
        if entry.index in seen:
            raise DuplicateIndex(f"{path}:{lineno}: index {entry.index} appears more than once")
        seen.add(entry.index)
        entries.append(entry)
    return Manifest(header, entries, dropped)


def load(path: str | Path) -> Manifest:
    """Read a manifest without modifying it."""
    path = Path(path)
    return _parse_lines(path, path.read_bytes())


def repair_tail(path: str | Path) -> bool:
    """Truncate a torn final line in place; returns True if anything was cut."""
    path = Path(path)
    with open(path, "rb+") as fh:
        data = fh.read()
        if not data or data.endswith(b"\n"):
            return False
        keep = data.rfind(b"\n") + 1
        log.warning("%s: truncating %d-byte partial record", path, len(data) - keep)
        fh.truncate(keep)
        fh.flush()
        os.fsync(fh.fileno())
    return True


class ManifestWriter:
    """Single writer for one manifest file.

    Opening an existing manifest repairs a torn tail and checks that its
    header names the same plan; a different plan raises :class:`RefusesResume`.
    """

    def __init__(self, path: str | Path, header: ManifestHeader | None = None, fsync: bool = True):
        self.path = Path(path)
        self.fsync = fsync
        if self.path.exists() and self.path.stat().st_size > 0:
            repair_tail(self.path)
            existing = load(self.path)
            if header is not None and existing.header != header:
                raise RefusesResume(
                    f"{self.path} belongs to plan {getattr(existing.header, 'plan_digest', None)}, "
                    f"not {header.plan_digest}"
                )
            self.header = existing.header
            self.indices = {e.index for e in existing.entries}
            self._fh = open(self.path, "ab")
        else:
            self.header = header
            self.indices = set()
            self._fh = open(self.path, "ab")
            if header is not None:
                self._write(header.to_line())

    def _write(self, line: str) -> None:
        start = self._fh.tell()
        try:
            self._fh.write(line.encode("utf-8"))
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
        except OSError as exc:
            try:
                self._fh.truncate(start)
            except OSError:
                pass  # the reader drops a torn tail anyway
            raise IoError(f"{self.path}: {exc}") from exc

    def append(self, entry: ManifestEntry) -> None:
        if entry.index in self.indices:
            raise DuplicateIndex(f"{self.path}: index {entry.index} already recorded")
        self._write(entry.to_line())
        self.indices.add(entry.index)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def append(path: str | Path, entry: ManifestEntry) -> None:
    """Append one entry to ``path`` (created without a header if missing)."""
    with ManifestWriter(path) as writer:
        writer.append(entry)


def drop_entries(path: str | Path, status: str = FAILED) -> list[int]:
    """Atomically rewrite the manifest without entries of ``status``; returns their indices."""
    path = Path(path)
    repair_tail(path)
    manifest = load(path)
    dropped = [e.index for e in manifest.entries if e.status == status]
    if not dropped:
        return []
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        if manifest.header is not None:
            fh.write(manifest.header.to_line())
        for e in manifest.entries:
            if e.status != status:
                fh.write(e.to_line())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return dropped


@dataclass
class DistributionReport:
    class_freq: dict[str, float]
    class_prob: dict[str, float]
    class_counts: dict[str, int]
    cell_counts: dict[str, int]
    plan_cell_counts: dict[str, int]
    failed_cell_counts: dict[str, int]
    max_class_deviation: float | None
    cell_balance_ok: bool
    succeeded: int
    failed: int
    planned: int
    no_data: bool = False
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def format_table(self) -> str:
        lines = [f"planned {self.planned}  succeeded {self.succeeded}  failed {self.failed}"]
        if self.no_data:
            lines.append("no data: the manifest has no succeeded entries")
        lines.append("")
        lines.append(f"{'class':<16}{'P_i':>10}{'freq':>10}{'count':>8}")
        for name, p in self.class_prob.items():
            freq = self.class_freq.get(name)
            freq_s = f"{freq:10.4f}" if freq is not None else f"{'-':>10}"
            lines.append(f"{name:<16}{p:10.4f}{freq_s}{self.class_counts.get(name, 0):8d}")
        dev = "n/a" if self.max_class_deviation is None else f"{self.max_class_deviation:.4f}"
        lines.append(f"max class deviation: {dev}")
        lines.append("")
        lines.append(f"{'cell':<24}{'planned':>8}{'done':>8}{'failed':>8}")
        for cell, planned in self.plan_cell_counts.items():
            lines.append(
                f"{cell:<24}{planned:8d}{self.cell_counts.get(cell, 0):8d}"
                f"{self.failed_cell_counts.get(cell, 0):8d}"
            )
        lines.append(f"cell balance ok: {self.cell_balance_ok}")
        return "\n".join(lines)


def cell_key(cell: tuple[str, str]) -> str:
    return f"{cell[0]}/{cell[1]}"


def build_report(manifest: Manifest, plan: GenerationPlan, table: SamplingTable) -> DistributionReport:
    """Compare realized counts in ``manifest`` with ``plan`` and ``table``.

    Frequencies use succeeded entries only. ``cell_balance_ok`` means realized
    cell sizes differ by at most one and none exceeds its planned size.
    """
    if plan.table_digest != table.digest:
        raise ValidationError("plan was built from a different sampling table")
    if manifest.header is not None and manifest.header.plan_digest != plan.digest:
        raise ValidationError("manifest belongs to a different plan")
    if manifest.header is not None and manifest.header.table_digest != table.digest:
        raise ValidationError("manifest belongs to a different sampling table")

    planned_by_index = {it.index: it for it in plan.items}
    done = [e for e in manifest.entries if e.status == SUCCEEDED]
    failed = [e for e in manifest.entries if e.status == FAILED]
    for e in manifest.entries:
        item = planned_by_index.get(e.index)
        if item is None or (item.class_name, item.weather, item.time) != (e.class_name, e.weather, e.time):
            raise ValidationError(f"manifest entry {e.index} does not match the plan")

    class_counts = Counter(e.class_name for e in done)
    n = len(done)
    class_prob = dict(zip(table.names, table.probs))
    notes = []
    if n:
        class_freq = {name: class_counts.get(name, 0) / n for name in table.names}
        max_dev = max(abs(class_freq[name] - p) for name, p in class_prob.items())
    else:
        class_freq, max_dev = {}, None
        notes.append("no succeeded entries")

    plan_cells = {cell_key(c): k for c, k in plan.cell_counts().items()}
    realized = Counter(cell_key(e.cell) for e in done)
    cell_counts = {c: realized.get(c, 0) for c in plan_cells}
    failed_cells = Counter(cell_key(e.cell) for e in failed)
    spread = max(cell_counts.values()) - min(cell_counts.values())
    within_plan = all(cell_counts[c] <= plan_cells[c] for c in plan_cells)
    if not within_plan:
        notes.append("some cells exceed their planned size")
    return DistributionReport(
        class_freq=class_freq,
        class_prob=class_prob,
        class_counts={name: class_counts.get(name, 0) for name in table.names},
        cell_counts=cell_counts,
        plan_cell_counts=plan_cells,
        failed_cell_counts={c: failed_cells.get(c, 0) for c in plan_cells},
        max_class_deviation=max_dev,
        cell_balance_ok=spread <= 1 and within_plan,
        succeeded=n,
        failed=len(failed),
        planned=len(plan),
        no_data=n == 0,
        notes=notes,
    )


def report(manifest_path: str | Path, plan_path: str | Path, table_path: str | Path) -> DistributionReport:
    """Load the three files and build their :class:`DistributionReport`."""
    table = read_table(table_path)
    plan = read_plan(plan_path)
    return build_report(load(manifest_path), plan, table)
