"""``zsfuse`` command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Settings resolve as command-line flag, then ``ZSFUSE_*`` environment
variable, then ``--config`` JSON file, then built-in default.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import attribution, images, prompts
from .backends import Backends, CacheStore, HttpEncoder, HttpLLM, MockEncoder, MockLLM
from .backends.mock import DEFAULT_MOCK_DIM
from .baselines import MatchMetric
from .classifier import DEFAULT_K, ClassFeatureMode, ClassifierModel, build_classifier
from .errors import (
    DuplicateLabelError,
    EmptyLabelError,
    EmptyLabelSetError,
    ImageDecodeError,
    ManifestError,
    ModelFormatError,
    ZsfuseError,
)
from .evaluation import EvalConfig, emit_report, evaluate, load_manifest
from .pipeline import FeatureSelection, FusionStrategy, classify

logger = logging.getLogger("zsfuse")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

_USAGE_ERRORS = (
    DuplicateLabelError,
    EmptyLabelError,
    EmptyLabelSetError,
    ManifestError,
    ModelFormatError,
    ImageDecodeError,
    FileNotFoundError,
)

# setting name -> (environment variable, default)
_SETTINGS: dict[str, tuple[str | None, Any]] = {
    "backend": ("ZSFUSE_BACKEND", "http"),
    "encoder_url": ("ZSFUSE_ENCODER_URL", None),
    "llm_url": ("ZSFUSE_LLM_URL", None),
    "api_key": ("ZSFUSE_API_KEY", None),
    "cache_dir": ("ZSFUSE_CACHE_DIR", None),
    "encoder_model": (None, "default"),
    "llm_model": (None, "default"),
    "max_text_chars": (None, None),
    "mock_dim": (None, None),
    "mock_fixtures": (None, None),
    "seed": (None, 0),
    "parallelism": (None, 8),
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Fully resolved settings for one invocation."""

    values: dict[str, Any]
    sources: dict[str, str] = field(default_factory=dict)

    def __getattr__(self, name: str) -> Any:
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def public(self) -> dict[str, Any]:
        return {k: v for k, v in self.values.items() if k != "api_key"}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    file_values: dict[str, Any] = {}
    if getattr(args, "config", None):
        try:
            file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    values, sources = {}, {}
    for name, (env, default) in _SETTINGS.items():
        flag = getattr(args, name, None)
        if flag is not None:
            values[name], sources[name] = flag, "flag"
        elif env and os.environ.get(env):
            values[name], sources[name] = os.environ[env], f"env:{env}"
        elif name in file_values:
            values[name], sources[name] = file_values[name], "config"
        else:
            values[name], sources[name] = default, "default"
    if getattr(args, "no_cache", False):
        values["cache_dir"], sources["cache_dir"] = None, "flag"
    for key in ("seed", "parallelism"):
        values[key] = int(values[key])
    for key in ("mock_dim", "max_text_chars"):
        if values[key] is not None:
            values[key] = int(values[key])
    if values["backend"] not in ("mock", "http"):
        raise UsageError(f"unknown backend {values['backend']!r}")
    return RunConfig(values, sources)


def make_backends(cfg: RunConfig, model_dim: int | None = None) -> Backends:
    if cfg.backend == "mock":
        text_fx, image_fx, llm_fx = {}, {}, {}
        if cfg.mock_fixtures:
            try:
                raw = json.loads(Path(cfg.mock_fixtures).read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                raise UsageError(f"cannot read mock fixtures: {exc}") from exc
            text_fx, image_fx, llm_fx = raw.get("text", {}), raw.get("image", {}), raw.get("llm", {})
        dim = cfg.mock_dim or model_dim or DEFAULT_MOCK_DIM
        encoder = MockEncoder(dim, cfg.seed, text_fx, image_fx, max_text_chars=cfg.max_text_chars)
        return Backends.create(encoder, MockLLM(llm_fx), cfg.cache_dir)
    if not cfg.encoder_url or not cfg.llm_url:
        raise UsageError("http backend needs --encoder-url/--llm-url or ZSFUSE_ENCODER_URL/ZSFUSE_LLM_URL")
    encoder = HttpEncoder(
        cfg.encoder_url, cfg.encoder_model, max_text_chars=cfg.max_text_chars, api_key=cfg.api_key
    )
    llm = HttpLLM(cfg.llm_url, cfg.llm_model, api_key=cfg.api_key)
    return Backends.create(encoder, llm, cfg.cache_dir)


def _load_model(path: str) -> ClassifierModel:
    if not Path(path).is_file():
        raise UsageError(f"model file not found: {path}")
    return ClassifierModel.load(path)


def _read_labels(path: str) -> list[str]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read labels: {exc}") from exc
    return [line.strip() for line in lines if line.strip()]


# -- commands ------------------------------------------------------------------


def cmd_build(args: argparse.Namespace, cfg: RunConfig) -> int:
    template = prompts.DEFAULT_TEMPLATE
    if args.manifest:
        manifest = load_manifest(args.manifest)
        labels = list(manifest.labels)
        template = manifest.template_override or template
    else:
        labels = _read_labels(args.labels)
    if args.dataset_template:
        template = prompts.dataset_template(args.dataset_template)
    if args.template:
        template = prompts.LabelTemplate(args.template)
    try:
        mode = ClassFeatureMode(args.mode, args.k, template)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    backends = make_backends(cfg)
    model = build_classifier(labels, mode, backends, parallelism=cfg.parallelism)
    model.save(args.out, "<f4" if args.precision == "f32" else "<f8")
    print(
        f"built classifier: m={model.m} n={model.dim} mode={mode.kind} "
        f"backend={backends.identity} -> {args.out}"
    )
    return EXIT_OK


def cmd_classify(args: argparse.Namespace, cfg: RunConfig) -> int:
    model = _load_model(args.model)
    backends = make_backends(cfg, model.dim)
    data = images.read_image(args.image)
    pred = classify(
        data, model, FeatureSelection.parse(args.features), FusionStrategy(args.strategy), backends,
        degraded=args.degraded, query_mode=args.query_mode,
    )
    top = [(i, model.labels[i], float(pred.scores[i])) for i in pred.top_k(args.top)]
    if args.json:
        out = pred.to_dict(args.top)
        out["top"] = [{"index": i, "label": lab, "score": s} for i, lab, s in top]
        print(json.dumps(out, indent=2, ensure_ascii=False))
        return EXIT_OK
    print(pred.class_label)
    for i, lab, s in top:
        print(f"  {i:>4}  {s:+.6f}  {lab}")
    if pred.degraded:
        print(f"note: degraded, skipped features: {', '.join(pred.degraded)}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, cfg: RunConfig) -> int:
    model = _load_model(args.model)
    manifest = load_manifest(args.manifest, strict=args.strict)
    backends = make_backends(cfg, model.dim)
    config = EvalConfig(
        selection=FeatureSelection.parse(args.features),
        strategy=FusionStrategy(args.strategy),
        baseline=MatchMetric.parse(args.baseline) if args.baseline else None,
        degraded=args.degraded,
        parallelism=cfg.parallelism,
        query_mode=args.query_mode,
        max_failure_fraction=args.max_failure_fraction,
    )
    report = evaluate(manifest, model, config, backends)
    report.config["run"] = cfg.public()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{args.prefix}.json").write_bytes(emit_report(report, "json"))
    (out_dir / f"{args.prefix}.csv").write_bytes(emit_report(report, "csv"))
    print(
        f"[{report.method}] top1={report.top1:.4f} top5={report.top5:.4f} kappa={report.kappa:.4f} "
        f"evaluated={report.evaluated} failures={report.failures} "
        f"network_calls={report.counters['encode_text_calls'] + report.counters['encode_image_calls'] + report.counters['generate_calls']}"
    )
    return EXIT_OK


def cmd_attribute(args: argparse.Namespace, cfg: RunConfig) -> int:
    model = _load_model(args.model)
    backends = make_backends(cfg, model.dim)
    try:
        img_sched = attribution.ImageMaskSchedule(args.kernel, args.stride, args.growth, args.max_kernel)
        txt_sched = attribution.TextMaskSchedule(args.text_width, args.min_text_width)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    amap, pixels = attribution.attribute(
        images.read_image(args.image), model, backends, img_sched, txt_sched,
        threshold=args.threshold, fill=args.fill, parallelism=cfg.parallelism,
    )
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.png").write_bytes(attribution.render_heatmap(amap, pixels))
    Path(f"{prefix}.json").write_text(amap.sidecar_json(), encoding="utf-8")
    print(f"baseline: {model.labels[amap.baseline_index]} (index {amap.baseline_index})")
    print(f"kernel_used: {amap.image.kernel_used}")
    if not amap.image.highlighted:
        print("note: no highlights in image at any kernel size")
    for role in attribution.TEXT_ROLES:
        words = ", ".join(f"{w} ({v:+.4f})" for w, v in amap.top_words(role, 3))
        print(f"top {role} words: {words or '-'}")
    return EXIT_OK


def cmd_cache(args: argparse.Namespace, cfg: RunConfig) -> int:
    if not cfg.cache_dir:
        raise UsageError("no cache directory (use --cache-dir or ZSFUSE_CACHE_DIR)")
    store = CacheStore(cfg.cache_dir)
    if args.action == "stats":
        stats = store.stats()
        total = sum(s["entries"] for s in stats.values())
        size = sum(s["bytes"] for s in stats.values())
        print(f"entries={total} bytes={size}")
        for identity, s in stats.items():
            print(f"  {identity}: entries={s['entries']} bytes={s['bytes']}")
        return EXIT_OK
    if args.action == "verify":
        bad = store.verify()
        print(f"checked={len(store.keys())} corrupt={len(bad)}")
        for key in bad:
            print(f"  corrupt: {key}")
        return EXIT_RUNTIME if bad else EXIT_OK
    if not args.yes:
        print("refusing to clear the cache without --yes", file=sys.stderr)
        return EXIT_USAGE
    print(f"removed={store.clear()}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("backends")
    g.add_argument("--backend", choices=["mock", "http"], default=None)
    g.add_argument("--encoder-url", dest="encoder_url", default=None)
    g.add_argument("--llm-url", dest="llm_url", default=None)
    g.add_argument("--api-key", dest="api_key", default=None)
    g.add_argument("--encoder-model", dest="encoder_model", default=None)
    g.add_argument("--llm-model", dest="llm_model", default=None)
    g.add_argument("--max-text-chars", dest="max_text_chars", type=int, default=None)
    g.add_argument("--cache-dir", dest="cache_dir", default=None)
    g.add_argument("--no-cache", dest="no_cache", action="store_true")
    g.add_argument("--mock-dim", dest="mock_dim", type=int, default=None)
    g.add_argument("--mock-fixtures", dest="mock_fixtures", default=None,
                   help='JSON with optional "llm", "text", "image" fixture tables')
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--parallelism", type=int, default=None)
    g.add_argument("--config", default=None, help="JSON settings file")
    g.add_argument("-v", "--verbose", action="store_true")


def _inference_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--features", default="if,df,pf", help="comma list of if, df, pf")
    p.add_argument("--strategy", choices=[s.value for s in FusionStrategy], default="avg-feature")
    p.add_argument("--degraded", action="store_true", help="skip features whose backend call fails")
    p.add_argument("--query-mode", dest="query_mode", choices=["dual", "single"], default="dual")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zsfuse", description="LLM-augmented zero-shot image classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build a classifier model file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--labels", help="text file, one class label per line")
    src.add_argument("--manifest", help="dataset manifest JSON")
    p.add_argument("--mode", choices=["labels", "template", "descriptions", "combined"], default="combined")
    p.add_argument("--k", type=int, default=DEFAULT_K, help="class descriptions per label (multiple of 5)")
    p.add_argument("--template", help="label template containing {class_label}")
    p.add_argument("--dataset-template", dest="dataset_template", choices=["default", "pets", "dtd", "cars"])
    p.add_argument("--precision", choices=["f64", "f32"], default="f64")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("classify", help="classify one image")
    p.add_argument("image")
    p.add_argument("--model", required=True)
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--json", action="store_true")
    _inference_flags(p)
    _common(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="evaluate on a manifest")
    p.add_argument("manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--baseline", help="rouge1, rouge2, ..., rougeL or embed")
    p.add_argument("--max-failure-fraction", dest="max_failure_fraction", type=float, default=0.01)
    p.add_argument("--strict", action="store_true", help="fail early on missing images")
    p.add_argument("--out-dir", dest="out_dir", default=".")
    p.add_argument("--prefix", default="report")
    _inference_flags(p)
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attribute", help="occlusion attribution for one image")
    p.add_argument("image")
    p.add_argument("--model", required=True)
    p.add_argument("--kernel", type=int, default=50)
    p.add_argument("--stride", type=int, default=10)
    p.add_argument("--growth", type=int, default=50)
    p.add_argument("--max-kernel", dest="max_kernel", type=int, default=200)
    p.add_argument("--text-width", dest="text_width", type=int, default=3)
    p.add_argument("--min-text-width", dest="min_text_width", type=int, default=1)
    p.add_argument("--threshold", type=float, default=attribution.HIGHLIGHT_THRESHOLD)
    p.add_argument("--fill", type=int, default=attribution.FILL_VALUE)
    p.add_argument("--out", required=True, help="output prefix; writes PREFIX.png and PREFIX.json")
    _common(p)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("cache", help="inspect or manage the response cache")
    p.add_argument("action", choices=["stats", "verify", "clear"])
    p.add_argument("--yes", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_cache)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.verbose:
            for name, source in cfg.sources.items():
                shown = "***" if name == "api_key" and cfg.values[name] else cfg.values[name]
                print(f"config {name}={shown!r} ({source})", file=sys.stderr)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _USAGE_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ZsfuseError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
