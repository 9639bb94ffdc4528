"""Run a generation plan end to end: prompts, image requests, files, manifest.

Output layout under ``out_dir``::

    images/{index:06}_{class}_{weather}_{time}.png
    manifest.jsonl      header record + one entry per finished plan item
    plan.tsv            copy of the plan being executed
    table.json          sampling table the plan was drawn from (when known)
    run.lock            held with flock(2) while a run owns the directory
    run.log             timestamped progress log

Images are written to a temp file and renamed into place before their
manifest entry is appended, so a crash at any point leaves either no entry
(the item reruns) or a complete one. Entries are appended in plan order.
"""
from __future__ import annotations

import fcntl
import hashlib
import io
import logging
import os
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from PIL import Image

from . import manifest as mf
from .backends import ImageBackend, ImageRequest, TextBackend
from .errors import (
    BackendUnavailable,
    EmptyCompletion,
    LockHeld,
    ProtocolError,
    RefusesResume,
    ValidationError,
    WeatherGenError,
)
from .prompts import DEFAULT_BUDGET, DescriptorBank, PromptTemplate, generate_prompt
from .retry import RetryPolicy, call_with_retry
from .sampler import GenerationPlan, PlanItem, SamplingTable, read_table, write_table

log = logging.getLogger(__name__)

TMP_SUFFIX = ".tmp"

# (event, plan item) hook; tests use it to kill the process at chosen points
EventHook = Callable[[str, PlanItem], None]


@dataclass(frozen=True)
class ImageArtifact:
    bytes_digest: str
    path: str
    width: int
    height: int
    backend_id: str
    attempts: int = 1


@dataclass
class EngineConfig:
    """How prompts are produced. ``text_backend=None`` or ``fallback_only`` means bank only."""

    template: PromptTemplate = field(default_factory=PromptTemplate)
    text_backend: TextBackend | None = None
    bank: DescriptorBank = field(default_factory=DescriptorBank.default)
    budget: int = DEFAULT_BUDGET
    fallback_only: bool = False
    use_fallback: bool = True
    instruction: str | None = None
    temperature: float = 0.7
    text_policy: RetryPolicy = field(default_factory=RetryPolicy)


@dataclass
class BackendConfig:
    backend: ImageBackend
    policy: RetryPolicy = field(default_factory=RetryPolicy)
    width: int = 512
    height: int = 512
    steps: int = 30
    guidance: float = 7.5
    negative_prompt: str = ""


@dataclass
class RunReport:
    requested: int
    succeeded: int
    failed: int
    skipped_resume: int
    wall_time: float
    cell_counts: dict[str, int]
    class_counts: dict[str, int]
    # failed entries anywhere in the final manifest, including earlier runs
    manifest_failed: int = 0

    @property
    def ok(self) -> bool:
        return self.failed == 0 and self.manifest_failed == 0


def slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-").lower() or "x"


def image_name(item: PlanItem) -> str:
    return f"{item.index:06d}_{slug(item.class_name)}_{slug(item.weather)}_{slug(item.time)}.png"


def atomic_write_bytes(path: Path, data: bytes, before_rename: Callable[[], None] | None = None) -> None:
    tmp = path.with_name(f".{path.name}{TMP_SUFFIX}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        if before_rename is not None:
            before_rename()
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def remove_orphans(directory: Path) -> int:
    n = 0
    for p in directory.glob(f".*{TMP_SUFFIX}"):
        p.unlink(missing_ok=True)
        n += 1
    if n:
        log.info("removed %d orphan temp files from %s", n, directory)
    return n


def request_image(
    backend: ImageBackend,
    req: ImageRequest,
    dest: str | Path,
    policy: RetryPolicy = RetryPolicy(),
    *,
    root: str | Path | None = None,
    before_rename: Callable[[], None] | None = None,
) -> ImageArtifact:
    """Fetch one image with retries, validate it and write it atomically to ``dest``.

    Non-PNG payloads are re-encoded to PNG. ``ImageArtifact.path`` is relative
    to ``root`` when given.
    """
    dest = Path(dest)
    data, attempts = call_with_retry(lambda: backend.generate(req), policy, "image request")
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise ProtocolError(f"backend returned undecodable image data: {exc}") from exc
    if img.size != (req.width, req.height):
        raise ValidationError(f"image is {img.size[0]}x{img.size[1]}, requested {req.width}x{req.height}")
    if img.format != "PNG":
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        data = buf.getvalue()
    atomic_write_bytes(dest, data, before_rename)
    rel = dest.relative_to(root).as_posix() if root is not None else dest.as_posix()
    return ImageArtifact(
        hashlib.sha256(data).hexdigest(), rel, req.width, req.height,
        getattr(backend, "backend_id", type(backend).__name__), attempts,
    )


class DirectoryLock:
    """Exclusive advisory lock on ``run.lock``; released by the kernel if the process dies."""

    def __init__(self, path: Path):
        self.path = path
        self._fh = None

    def __enter__(self):
        self._fh = open(self.path, "a+")
        try:
            fcntl.flock(self._fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            self._fh.close()
            raise LockHeld(f"{self.path} is held by another run") from None
        self._fh.seek(0)
        self._fh.truncate()
        self._fh.write(f"{os.getpid()}\n")
        self._fh.flush()
        return self

    def __exit__(self, *exc):
        fcntl.flock(self._fh, fcntl.LOCK_UN)
        self._fh.close()


def _adopt_file(path: Path, text: str, what: str) -> None:
    if path.exists():
        if path.read_text(encoding="utf-8") != text:
            raise RefusesResume(f"{path} holds a different {what}; use a fresh output directory")
        return
    atomic_write_bytes(path, text.encode("utf-8"))


def _process(
    item: PlanItem, engine: EngineConfig, bcfg: BackendConfig, out_dir: Path, hook: EventHook | None
) -> mf.ManifestEntry:
    def fire(event: str) -> None:
        if hook is not None:
            hook(event, item)

    backend = engine.bank if engine.fallback_only or engine.text_backend is None else engine.text_backend
    try:
        spec = generate_prompt(
            item, engine.template, backend, engine.budget,
            fallback=engine.bank if engine.use_fallback else None,
            instruction=engine.instruction,
            temperature=engine.temperature,
            policy=engine.text_policy,
        )
    except (BackendUnavailable, EmptyCompletion, ProtocolError) as exc:
        log.error("item %d: prompt generation failed: %s", item.index, exc)
        return mf.ManifestEntry(
            item.index, item.class_name, item.weather, item.time, "", "", "none",
            item.derived_seed, mf.FAILED, error=f"prompt: {exc}",
            attempt_count=getattr(exc, "attempts", 1),
        )
    fire("prompt_ready")

    def entry(**kw) -> mf.ManifestEntry:
        return mf.ManifestEntry(
            item.index, item.class_name, item.weather, item.time, spec.base_text,
            spec.enriched_text, spec.source, item.derived_seed, **kw,
        )

    req = ImageRequest(
        spec.enriched_text, item.derived_seed, bcfg.negative_prompt,
        bcfg.width, bcfg.height, bcfg.steps, bcfg.guidance,
    )
    try:
        art = request_image(
            bcfg.backend, req, out_dir / "images" / image_name(item), bcfg.policy,
            root=out_dir, before_rename=lambda: fire("image_staged"),
        )
    except BackendUnavailable as exc:
        log.error("item %d: %s", item.index, exc)
        return entry(status=mf.FAILED, error=str(exc), attempt_count=exc.attempts)
    except (ProtocolError, ValidationError) as exc:
        log.error("item %d: %s", item.index, exc)
        return entry(status=mf.FAILED, error=str(exc))
    fire("image_committed")
    return entry(
        status=mf.SUCCEEDED, image_path=art.path, image_digest=art.bytes_digest,
        attempt_count=art.attempts,
    )


def run(
    plan: GenerationPlan,
    engine: EngineConfig,
    backend: BackendConfig,
    out_dir: str | Path,
    concurrency: int = 1,
    *,
    table: SamplingTable | None = None,
    retry_failed: bool = False,
    on_event: EventHook | None = None,
    fsync: bool = True,
) -> RunReport:
    """Materialize every plan item once, resuming from an existing manifest.

    Items already recorded (succeeded or failed) are skipped; with
    ``retry_failed`` the failed ones are first removed from the manifest and
    rerun. At most ``concurrency`` prompt/image requests are in flight.
    """
    if concurrency < 1:
        raise ValidationError("concurrency must be >= 1")
    if table is not None and table.digest != plan.table_digest:
        raise ValidationError("sampling table does not match the plan")
    if engine.fallback_only or engine.text_backend is None or engine.use_fallback:
        missing = [c for c in plan.grid.cells if not engine.bank.covers(*c)]
        if missing:
            raise ValidationError(f"descriptor bank has no fragments for cells {missing}")

    out_dir = Path(out_dir)
    images = out_dir / "images"
    images.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()

    with DirectoryLock(out_dir / "run.lock"):
        handler = logging.FileHandler(out_dir / "run.log", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        pkg_log = logging.getLogger("weathergen")
        saved_level = pkg_log.level
        if pkg_log.getEffectiveLevel() > logging.INFO:
            pkg_log.setLevel(logging.INFO)
        pkg_log.addHandler(handler)
        try:
            _adopt_file(out_dir / "plan.tsv", plan.to_tsv(), "plan")
            table_path = out_dir / "table.json"
            if table is not None:
                if table_path.exists() and read_table(table_path).digest != table.digest:
                    raise RefusesResume(f"{table_path} holds a different sampling table")
                if not table_path.exists():
                    write_table(table, table_path)
            remove_orphans(images)
            remove_orphans(out_dir)

            manifest_path = out_dir / "manifest.jsonl"
            if retry_failed and manifest_path.exists():
                requeued = mf.drop_entries(manifest_path, mf.FAILED)
                if requeued:
                    log.info("re-queued %d failed items", len(requeued))
            header = mf.ManifestHeader(plan.digest, plan.table_digest)
            with mf.ManifestWriter(manifest_path, header, fsync=fsync) as writer:
                done = set(writer.indices)
                todo = [it for it in plan.items if it.index not in done]
                log.info(
                    "run: %d planned, %d already recorded, %d to do, concurrency %d",
                    len(plan), len(done), len(todo), concurrency,
                )
                succeeded = failed = 0
                with ThreadPoolExecutor(concurrency) as pool:
                    futures = [pool.submit(_process, it, engine, backend, out_dir, on_event) for it in todo]
                    try:
                        for it, fut in zip(todo, futures):
                            entry = fut.result()
                            writer.append(entry)
                            if entry.status == mf.SUCCEEDED:
                                succeeded += 1
                            else:
                                failed += 1
                            log.info("item %d %s", it.index, entry.status)
                            if on_event is not None:
                                on_event("entry_appended", it)
                    except BaseException:
                        for f in futures:
                            f.cancel()
                        raise

            final = mf.load(manifest_path)
            ok = [e for e in final.entries if e.status == mf.SUCCEEDED]
            report = RunReport(
                requested=len(plan),
                succeeded=succeeded,
                failed=failed,
                skipped_resume=len(done),
                wall_time=time.monotonic() - started,
                cell_counts=dict(Counter(mf.cell_key(e.cell) for e in ok)),
                class_counts=dict(Counter(e.class_name for e in ok)),
                manifest_failed=sum(e.status == mf.FAILED for e in final.entries),
            )
            log.info(
                "run finished: %d succeeded, %d failed, %d skipped in %.2fs",
                report.succeeded, report.failed, report.skipped_resume, report.wall_time,
            )
            return report
        except WeatherGenError:
            log.exception("run aborted")
            raise
        finally:
            pkg_log.removeHandler(handler)
            pkg_log.setLevel(saved_level)
            handler.close()
