"""Dataset manifests, classification metrics, evaluation runs, and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import images, prompts
from .backends import Backends
from .baselines import MatchMetric, label_scores
from .classifier import ClassifierModel, check_labels
from .errors import (
    EmptyMatrixError,
    EmptyPredictionsError,
    EvaluationFailedError,
    IndexOutOfRangeError,
    ManifestError,
    MissingImageError,
    ZsfuseError,
)
from .pipeline import (
    FeatureSelection,
    FusionStrategy,
    Prediction,
    PredictionFailure,
    classify_batch,
    top_k_indices,
)
from .prompts import LabelTemplate

logger = logging.getLogger(__name__)

TOP_K = 5
DEFAULT_MAX_FAILURE_FRACTION = 0.01
TOKENIZATION = "lowercase-nonalnum-split"
CSV_HEADER = ("image", "true", "predicted", "correct", "top5_hit")
CSV_FOOTER_KEYS = ("method", "evaluated", "failures", "top1", "top5", "kappa")


# -- manifests ---------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    image: str
    label_index: int


@dataclass
class DatasetManifest:
    """Labels plus image records; relative image paths resolve against ``root``."""

    name: str
    labels: tuple[str, ...]
    records: list[ManifestRecord]
    template_override: LabelTemplate | None = None
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.labels = tuple(self.labels)
        try:
            check_labels(self.labels)
        except ValueError as exc:
            raise ManifestError(str(exc)) from exc
        for i, rec in enumerate(self.records):
            if not isinstance(rec.label_index, int) or not 0 <= rec.label_index < len(self.labels):
                raise IndexOutOfRangeError(
                    f"record {i}: label_index {rec.label_index} outside [0, {len(self.labels)})"
                )

    def image_path(self, record: ManifestRecord) -> Path:
        p = Path(record.image)
        return p if p.is_absolute() else self.root / p

    def resolved(self) -> list[ManifestRecord]:
        return [ManifestRecord(str(self.image_path(r)), r.label_index) for r in self.records]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"name": self.name, "labels": list(self.labels)}
        if self.template_override is not None:
            out["template_override"] = self.template_override.pattern
        out["records"] = [{"image": r.image, "label_index": r.label_index} for r in self.records]
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_manifest(path: str | Path, strict: bool = False) -> DatasetManifest:
    """Read and validate a JSON manifest.

    With ``strict=True`` every referenced image must exist.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    try:
        records = [ManifestRecord(str(r["image"]), r["label_index"]) for r in raw["records"]]
        override = raw.get("template_override")
        manifest = DatasetManifest(
            name=str(raw["name"]),
            labels=tuple(raw["labels"]),
            records=records,
            template_override=LabelTemplate(override) if override else None,
            root=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"manifest {path} does not match the schema: {exc!r}") from exc
    except ValueError as exc:
        if isinstance(exc, ManifestError):
            raise
        raise ManifestError(f"manifest {path}: {exc}") from exc
    if strict:
        for rec in manifest.records:
            if not manifest.image_path(rec).is_file():
                raise MissingImageError(f"image not found: {manifest.image_path(rec)}")
    return manifest


# -- metrics -----------------------------------------------------------------


def top_k_accuracy(scores: Sequence[Sequence[float]] | np.ndarray, true_indices: Sequence[int], k: int) -> float:
    """Fraction of records whose true class is among the ``k`` best scores.

    Ties are ranked by ascending class index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(true_indices) == 0:
        raise EmptyPredictionsError("no predictions to score")
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != len(true_indices):
        raise ValueError(f"scores shape {arr.shape} does not match {len(true_indices)} records")
    hits = sum(int(t) in top_k_indices(row, k) for row, t in zip(arr, true_indices))
    return hits / len(true_indices)


def confusion_matrix(true_indices: Sequence[int], predicted: Sequence[int], m: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    counts = np.zeros((m, m), dtype=np.int64)
    for t, p in zip(true_indices, predicted):
        counts[t, p] += 1
    return counts


def cohens_kappa(confusion: Sequence[Sequence[int]] | np.ndarray) -> float:
    c = np.asarray(confusion, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {c.shape}")
    total = c.sum()
    if total <= 0:
        raise EmptyMatrixError("confusion matrix has no counts")
    p_o = np.trace(c) / total
    p_e = float(c.sum(axis=1) @ c.sum(axis=0)) / total**2
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


# -- evaluation ----------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    selection: FeatureSelection = field(default_factory=FeatureSelection)
    strategy: FusionStrategy = FusionStrategy.AVERAGE_FEATURE
    baseline: MatchMetric | None = None
    degraded: bool = False
    parallelism: int = 8
    query_mode: str = "dual"
    max_failure_fraction: float = DEFAULT_MAX_FAILURE_FRACTION
    image_size: int = images.IMAGE_SIZE

    @property
    def method(self) -> str:
        if self.baseline is not None:
            return f"baseline:{self.baseline.name}"
        return f"fusion:{self.selection.short}:{self.strategy.value}"


@dataclass
class RecordResult:
    image: str
    true_index: int
    predicted_index: int | None
    top5: list[int]
    degraded: list[str] = field(default_factory=list)
    error: str | None = None

    @property
    def correct(self) -> bool:
        return self.predicted_index == self.true_index

    @property
    def top5_hit(self) -> bool:
        return self.true_index in self.top5


@dataclass
class EvaluationReport:
    dataset: str
    method: str
    records: list[RecordResult]
    top1: float
    top5: float
    kappa: float
    confusion: list[list[int]]
    counters: dict[str, int]
    config: dict[str, Any]

    @property
    def evaluated(self) -> int:
        return sum(r.error is None for r in self.records)

    @property
    def failures(self) -> int:
        return len(self.records) - self.evaluated

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvaluationReport":
        d = dict(d)
        d["records"] = [RecordResult(**r) for r in d["records"]]
        return cls(**d)


def _baseline_batch(
    sources: list[str],
    labels: Sequence[str],
    metric: MatchMetric,
    backends: Backends,
    config: EvalConfig,
) -> list[np.ndarray | PredictionFailure]:
    prompt = prompts.render_classification_prompt(labels)
    encoder = backends.encoder if metric.kind == "embedding" else None

    def one(pair: tuple[int, str]) -> np.ndarray | PredictionFailure:
        i, src = pair
        try:
            _, png = images.preprocess(images.read_image(src), config.image_size)
            text = backends.llm.generate(prompt, png, 0.0)
            return label_scores(text, labels, metric, encoder)
        except ZsfuseError as exc:
            return PredictionFailure(i, src, type(exc).__name__, str(exc))

    if config.parallelism <= 1:
        return [one(p) for p in enumerate(sources)]
    with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
        return list(pool.map(one, enumerate(sources)))


def evaluate(
    manifest: DatasetManifest,
    model: ClassifierModel,
    config: EvalConfig,
    backends: Backends,
) -> EvaluationReport:
    """Classify every manifest record and compute top-1/top-5/kappa.

    Raises:
        EmptyPredictionsError: the manifest has no records, or all failed.
        EvaluationFailedError: failures exceed ``config.max_failure_fraction``.
    """
    if not manifest.records:
        raise EmptyPredictionsError(f"manifest {manifest.name!r} has no records")
    if tuple(model.labels) != tuple(manifest.labels):
        raise ValueError("classifier labels do not match the manifest labels")
    before = backends.counters.snapshot()
    records = manifest.resolved()
    sources = [r.image for r in records]

    if config.baseline is not None:
        outcomes = _baseline_batch(sources, manifest.labels, config.baseline, backends, config)
    else:
        outcomes = classify_batch(
            sources, model, config.selection, config.strategy, backends,
            parallelism=config.parallelism, degraded=config.degraded,
            query_mode=config.query_mode, image_size=config.image_size,
        )

    results: list[RecordResult] = []
    score_rows, truths, preds = [], [], []
    for rec, out in zip(manifest.records, outcomes):
        if isinstance(out, PredictionFailure):
            results.append(RecordResult(rec.image, rec.label_index, None, [], error=f"{out.error_type}: {out.message}"))
            continue
        scores = out.scores if isinstance(out, Prediction) else out
        degraded = out.degraded if isinstance(out, Prediction) else []
        pred = top_k_indices(scores, 1)[0]
        results.append(RecordResult(rec.image, rec.label_index, pred, top_k_indices(scores, TOP_K), list(degraded)))
        score_rows.append(scores)
        truths.append(rec.label_index)
        preds.append(pred)

    failures = len(results) - len(truths)
    if failures / len(results) > config.max_failure_fraction:
        raise EvaluationFailedError(
            f"{failures}/{len(results)} records failed (limit {config.max_failure_fraction:.2%})"
        )
    if not truths:
        raise EmptyPredictionsError("every record failed")
    confusion = confusion_matrix(truths, preds, len(manifest.labels))
    after = backends.counters.snapshot()
    return EvaluationReport(
        dataset=manifest.name,
        method=config.method,
        records=results,
        top1=top_k_accuracy(score_rows, truths, 1),
        top5=top_k_accuracy(score_rows, truths, TOP_K),
        kappa=cohens_kappa(confusion),
        confusion=confusion.tolist(),
        counters={k: after[k] - before[k] for k in after},
        config={
            "method": config.method,
            "mode": model.mode.to_dict(),
            "selection": config.selection.short,
            "strategy": config.strategy.value,
            "baseline": config.baseline.name if config.baseline else None,
            "query_mode": config.query_mode,
            "degraded": config.degraded,
            "max_failure_fraction": config.max_failure_fraction,
            "resize": images.RESIZE_POLICY,
            "tokenization": TOKENIZATION,
            "inference_temperature": 0.0,
            "provenance": dict(model.provenance),
            "backend": backends.identity,
            "degraded_records": sum(bool(r.degraded) for r in results),
        },
    )


def emit_report(report: EvaluationReport, fmt: str = "json") -> bytes:
    """Serialize a report as full JSON or as per-record CSV with a summary footer."""
    if fmt == "json":
        return (json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n").encode("utf-8")
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in report.records:
        writer.writerow([
            r.image,
            r.true_index,
            "" if r.predicted_index is None else r.predicted_index,
            int(r.correct),
            int(r.top5_hit),
        ])
    summary = {
        "method": report.method,
        "evaluated": report.evaluated,
        "failures": report.failures,
        "top1": repr(report.top1),
        "top5": repr(report.top5),
        "kappa": repr(report.kappa),
    }
    for key in CSV_FOOTER_KEYS:
        writer.writerow([f"#{key}", summary[key]])
    return buf.getvalue().encode("utf-8")
