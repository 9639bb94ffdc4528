"""Command line entry point: ``stats``, ``plan``, ``generate``, ``report``.

Settings resolve as command-line flag, then ``--config`` JSON file (keys are
the flag names with dashes as underscores), then built-in defaults. Tokens
for HTTP backends are read only from environment variables.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import manifest as mf
from .backends import ChatCompletionBackend, HttpImageBackend, MockImageBackend
from .errors import WeatherGenError
from .labels import (
    DEFAULT_SMOOTHING,
    default_class_config,
    load_class_config,
    load_counts,
    scan_label_maps,
    thing_distribution,
)
from .orchestrator import BackendConfig, EngineConfig, run
from .prompts import DEFAULT_BUDGET, DescriptorBank, PromptTemplate
from .retry import RetryPolicy
from .sampler import (
    DEFAULT_TIMES,
    DEFAULT_WEATHERS,
    ConditionGrid,
    make_plan,
    read_plan,
    read_table,
    sampling_probabilities,
    write_plan,
    write_table,
)

log = logging.getLogger("weathergen.cli")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "stats": {"smoothing": DEFAULT_SMOOTHING, "out": "table.json", "pattern": "*.png", "workers": 1},
    "plan": {
        "total": 1000,
        "weathers": ",".join(DEFAULT_WEATHERS),
        "times": ",".join(DEFAULT_TIMES),
        "seed": 0,
        "out": "plan.tsv",
    },
    "generate": {
        "image_backend": "mock",
        "text_model": "llama",
        "text_token_env": "WEATHERGEN_TEXT_TOKEN",
        "image_token_env": "WEATHERGEN_IMAGE_TOKEN",
        "concurrency": 1,
        "word_budget": DEFAULT_BUDGET,
        "identifier_token": "V*",
        "scene_noun": "driving scene",
        "max_attempts": 3,
        "backoff": 0.5,
        "timeout": 300.0,
        "width": 512,
        "height": 512,
        "steps": 30,
        "guidance": 7.5,
        "negative_prompt": "",
        "temperature": 0.7,
    },
    "report": {},
}

FLAGS = ("fallback_only", "retry_failed", "omit_identifier", "no_fallback")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weathergen",
        description="Balanced, weather-diverse prompt plans and synthetic driving-scene generation.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON file with defaults for this command's flags")

    p = sub.add_parser("stats", help="thing-class distribution and sampling table")
    common(p)
    p.add_argument("--class-config", type=Path, help="class config JSON (default: Cityscapes 19 classes)")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--counts", type=Path, help="counts document {\"counts\": {name: pixels}}")
    src.add_argument("--label-dir", type=Path, help="directory of single-channel ID label PNGs")
    p.add_argument("--pattern", help="glob for label files under --label-dir (default *.png)")
    p.add_argument("--workers", type=_positive_int, help="parallel file readers for --label-dir")
    p.add_argument("--smoothing", type=_nonneg_int, help="pixels added to every thing class (default 1)")
    p.add_argument("--out", type=Path, help="sampling table output (default table.json)")

    p = sub.add_parser("plan", help="balanced generation plan from a sampling table")
    common(p)
    p.add_argument("--table", type=Path, help="sampling table written by 'stats'")
    p.add_argument("--total", type=_positive_int, help="number of plan items (default 1000)")
    p.add_argument("--weathers", help="comma-separated weather labels (default snowy,rainy,foggy)")
    p.add_argument("--times", help="comma-separated time-of-day labels (default daytime,nighttime)")
    p.add_argument("--seed", type=_nonneg_int, help="master seed, unsigned 64-bit (default 0)")
    p.add_argument("--out", type=Path, help="plan output (default plan.tsv)")

    p = sub.add_parser("generate", help="execute a plan against the text and image backends")
    common(p)
    p.add_argument("--plan", type=Path, help="plan file written by 'plan'")
    p.add_argument("--table", type=Path, help="sampling table (default: table.json next to the plan)")
    p.add_argument("--out-dir", type=Path, help="output directory (images, manifest, logs)")
    p.add_argument("--image-backend", help="'mock' or the URL of a txt2img endpoint")
    p.add_argument("--text-backend", help="URL of a chat-completions endpoint for scene descriptions")
    p.add_argument("--text-model", help="model name sent to the text backend")
    p.add_argument("--text-token-env", help="env var holding the text backend bearer token")
    p.add_argument("--image-token-env", help="env var holding the image backend bearer token")
    p.add_argument("--fallback-only", action="store_true", default=None, help="use the offline descriptor bank only")
    p.add_argument("--no-fallback", action="store_true", default=None, help="fail items instead of falling back to the bank")
    p.add_argument("--descriptor-bank", type=Path, help="descriptor bank JSON (default: bundled bank)")
    p.add_argument("--instruction-file", type=Path, help="standing instruction for the text backend")
    p.add_argument("--temperature", type=float, help="text backend sampling temperature")
    p.add_argument("--concurrency", type=_positive_int, help="max in-flight requests (default 1)")
    p.add_argument("--word-budget", type=_positive_int, help="max words per prompt (default 60)")
    p.add_argument("--omit-identifier", action="store_true", default=None, help="drop the identifier phrase from prompts")
    p.add_argument("--identifier-token", help="identifier token of the fine-tuned model (default V*)")
    p.add_argument("--scene-noun", help="scene noun after the identifier (default 'driving scene')")
    p.add_argument("--retry-failed", action="store_true", default=None, help="rerun items recorded as failed")
    p.add_argument("--max-attempts", type=_positive_int, help="attempts per backend request (default 3)")
    p.add_argument("--backoff", type=float, help="initial retry backoff in seconds (default 0.5)")
    p.add_argument("--timeout", type=float, help="HTTP timeout in seconds (default 300)")
    p.add_argument("--width", type=_positive_int, help="image width, multiple of 8 (default 512)")
    p.add_argument("--height", type=_positive_int, help="image height, multiple of 8 (default 512)")
    p.add_argument("--steps", type=_positive_int, help="diffusion steps (default 30)")
    p.add_argument("--guidance", type=float, help="guidance scale (default 7.5)")
    p.add_argument("--negative-prompt", help="negative prompt sent with every image request")

    p = sub.add_parser("report", help="realized vs planned class and cell balance")
    common(p)
    p.add_argument("--out-dir", type=Path, help="output directory of a 'generate' run")
    p.add_argument("--table", type=Path, help="sampling table (default: OUT_DIR/table.json)")
    p.add_argument("--json", type=Path, help="machine-readable report (default: OUT_DIR/report.json)")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over built-in defaults."""
    settings = dict(DEFAULTS[args.command])
    if args.config is not None:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise WeatherGenError(f"{args.config}: expected a JSON object")
        known = set(vars(args)) - {"command", "config", "verbose"}
        unknown = set(doc) - known
        if unknown:
            raise WeatherGenError(f"{args.config}: unknown settings {sorted(unknown)}")
        settings.update(doc)
    for key, value in vars(args).items():
        if key in ("command", "config", "verbose"):
            continue
        if value is not None:
            settings[key] = value
        else:
            settings.setdefault(key, False if key in FLAGS else None)
    for key, value in settings.items():
        if isinstance(value, str) and key in ("class_config", "counts", "label_dir", "out", "table", "plan",
                                               "out_dir", "descriptor_bank", "instruction_file", "json"):
            settings[key] = Path(value)
    return settings


def _require(s: dict, *keys: str) -> None:
    missing = [k for k in keys if s.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


class UsageError(Exception):
    pass


def cmd_stats(s: dict) -> int:
    cfg = load_class_config(s["class_config"]) if s.get("class_config") else default_class_config()
    if s.get("counts") is None and s.get("label_dir") is None:
        raise UsageError("one of --counts or --label-dir is required")
    if s.get("counts") is not None:
        counts = load_counts(s["counts"], cfg)
        source = str(s["counts"])
    else:
        counts = scan_label_maps(s["label_dir"], cfg, s["pattern"], s["workers"])
        source = str(s["label_dir"])
    dist = thing_distribution(counts, cfg, s["smoothing"])
    table = sampling_probabilities(dist)
    names = dict(zip(table.class_ids, table.names))
    write_table(table, s["out"], {
        "source": source,
        "smoothing": s["smoothing"],
        "files_scanned": counts.files_scanned,
        "shares": {names[k]: v for k, v in dist.shares.items()},
    })
    print(f"{'class':<16}{'pixels':>14}{'E_i':>10}{'P_i':>10}")
    for class_id, name, p in table.items():
        print(f"{name:<16}{counts.counts.get(class_id, 0):14d}{dist.shares[class_id]:10.4f}{p:10.4f}")
    print(f"source {source}  smoothing {s['smoothing']}  table {s['out']}  digest {table.digest[:12]}")
    return EXIT_OK


def cmd_plan(s: dict) -> int:
    _require(s, "table")
    table = read_table(s["table"])
    grid = ConditionGrid(
        tuple(w.strip() for w in str(s["weathers"]).split(",")),
        tuple(t.strip() for t in str(s["times"]).split(",")),
    )
    plan = make_plan(table, grid, int(s["total"]), int(s["seed"]))
    write_plan(plan, s["out"])
    for (weather, time), n in plan.cell_counts().items():
        print(f"{weather:<12}{time:<12}{n:8d}")
    for name in table.names:
        print(f"{name:<16}{plan.class_counts().get(name, 0):8d}")
    print(f"{len(plan)} items written to {s['out']}  digest {plan.digest[:12]}")
    return EXIT_OK


def _effective_config(s: dict) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(s.items())}


def cmd_generate(s: dict) -> int:
    _require(s, "plan", "out_dir")
    table_path = s.get("table") or Path(s["plan"]).with_name("table.json")
    table = read_table(table_path) if Path(table_path).exists() else None
    plan = read_plan(s["plan"], table)

    template = PromptTemplate(
        identifier_token=s["identifier_token"],
        scene_noun=s["scene_noun"],
        include_identifier=not s["omit_identifier"],
    )
    bank = DescriptorBank.load(s["descriptor_bank"]) if s.get("descriptor_bank") else DescriptorBank.default()
    policy = RetryPolicy(max_attempts=s["max_attempts"], backoff=s["backoff"])
    text_backend = None
    if s.get("text_backend") and not s["fallback_only"]:
        text_backend = ChatCompletionBackend(
            s["text_backend"], s["text_model"], s["text_token_env"], s["timeout"]
        )
    engine = EngineConfig(
        template=template,
        text_backend=text_backend,
        bank=bank,
        budget=s["word_budget"],
        fallback_only=bool(s["fallback_only"]),
        use_fallback=not s["no_fallback"],
        instruction=Path(s["instruction_file"]).read_text(encoding="utf-8") if s.get("instruction_file") else None,
        temperature=s["temperature"],
        text_policy=policy,
    )
    if s["image_backend"] == "mock":
        image_backend = MockImageBackend()
    else:
        image_backend = HttpImageBackend(s["image_backend"], "http", s["image_token_env"], s["timeout"])
    bcfg = BackendConfig(
        image_backend, policy, s["width"], s["height"], s["steps"], s["guidance"], s["negative_prompt"]
    )

    out_dir = Path(s["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(_effective_config(s), indent=2) + "\n", encoding="utf-8"
    )
    report = run(plan, engine, bcfg, out_dir, s["concurrency"], table=table, retry_failed=bool(s["retry_failed"]))
    print(
        f"requested {report.requested}  succeeded {report.succeeded}  failed {report.failed}  "
        f"skipped_resume {report.skipped_resume}  wall {report.wall_time:.2f}s"
    )
    for cell, n in sorted(report.cell_counts.items()):
        print(f"  {cell:<24}{n:8d}")
    if not report.ok:
        print(f"{report.manifest_failed} item(s) failed; rerun with --retry-failed", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_report(s: dict) -> int:
    _require(s, "out_dir")
    out_dir = Path(s["out_dir"])
    table_path = s.get("table") or out_dir / "table.json"
    rep = mf.report(out_dir / "manifest.jsonl", out_dir / "plan.tsv", table_path)
    print(rep.format_table())
    json_path = s.get("json") or out_dir / "report.json"
    Path(json_path).write_text(json.dumps(rep.to_dict(), indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


COMMANDS = {"stats": cmd_stats, "plan": cmd_plan, "generate": cmd_generate, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        settings = resolve(args)
        return COMMANDS[args.command](settings)
    except UsageError as exc:
        parser.error(str(exc))
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
    except (WeatherGenError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
