"""Query-feature extraction, fusion, scoring, and batch classification."""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import images, prompts
from .backends import Backends
from .classifier import ClassifierModel
from .errors import (
    BackendError,
    DimMismatchError,
    NoFeaturesAvailableError,
    ZsfuseError,
)
from .vectors import argmax_index, fuse_average, normalize, score

logger = logging.getLogger(__name__)

INFERENCE_TEMPERATURE = 0.0
FEATURE_NAMES = ("image", "description", "prediction")
SHORT_NAMES = {"if": "image", "df": "description", "pf": "prediction"}
QUERY_MODES = ("dual", "single")


@dataclass(frozen=True)
class FeatureSelection:
    use_image: bool = True
    use_description: bool = True
    use_prediction: bool = True

    def __post_init__(self):
        if not (self.use_image or self.use_description or self.use_prediction):
            raise ValueError("at least one feature must be selected")

    @property
    def names(self) -> tuple[str, ...]:
        flags = (self.use_image, self.use_description, self.use_prediction)
        return tuple(n for n, on in zip(FEATURE_NAMES, flags) if on)

    @classmethod
    def parse(cls, text: str) -> "FeatureSelection":
        """Parse ``"if,df,pf"``-style strings (short or long feature names)."""
        chosen = set()
        for part in text.split(","):
            part = part.strip().lower()
            if not part:
                continue
            name = SHORT_NAMES.get(part, part)
            if name not in FEATURE_NAMES:
                raise ValueError(f"unknown feature {part!r}")
            chosen.add(name)
        return cls("image" in chosen, "description" in chosen, "prediction" in chosen)

    @property
    def short(self) -> str:
        inv = {v: k for k, v in SHORT_NAMES.items()}
        return ",".join(inv[n] for n in self.names)

    @classmethod
    def all_subsets(cls) -> list["FeatureSelection"]:
        out = []
        for r in (1, 2, 3):
            for combo in combinations(FEATURE_NAMES, r):
                out.append(cls("image" in combo, "description" in combo, "prediction" in combo))
        return out


class FusionStrategy(str, enum.Enum):
    AVERAGE_FEATURE = "avg-feature"
    AVERAGE_SIMILARITY = "avg-sim"
    MAX_SIMILARITY = "max-sim"


@dataclass
class QueryFeatures:
    image_feature: np.ndarray | None = None
    description_feature: np.ndarray | None = None
    prediction_feature: np.ndarray | None = None
    description_text: str | None = None
    prediction_text: str | None = None

    def present(self) -> list[tuple[str, np.ndarray]]:
        """Available features in canonical (image, description, prediction) order."""
        pairs = zip(FEATURE_NAMES, (self.image_feature, self.description_feature, self.prediction_feature))
        return [(n, f) for n, f in pairs if f is not None]


@dataclass
class Prediction:
    class_index: int
    class_label: str
    scores: np.ndarray
    features: QueryFeatures
    degraded: list[str] = field(default_factory=list)

    def top_k(self, k: int) -> list[int]:
        return top_k_indices(self.scores, k)

    def to_dict(self, top: int = 5) -> dict[str, Any]:
        return {
            "class_index": self.class_index,
            "class_label": self.class_label,
            "top": [[int(i), float(self.scores[i])] for i in self.top_k(top)],
            "scores": [float(s) for s in self.scores],
            "description_text": self.features.description_text,
            "prediction_text": self.features.prediction_text,
            "degraded": list(self.degraded),
        }


@dataclass
class PredictionFailure:
    """A record that could not be classified; batches keep going."""

    index: int
    image: str
    error_type: str
    message: str


def top_k_indices(scores: Sequence[float] | np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` best scores, ordered by (-score, index)."""
    arr = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-arr, kind="stable")
    return [int(i) for i in order[:k]]


def _llm_texts(
    png: bytes, model: ClassifierModel, selection: FeatureSelection, backends: Backends, query_mode: str
) -> dict[str, str | Exception]:
    """Fetch the raw LLM texts each selected text feature needs, keeping errors in place."""
    wanted = [n for n in ("description", "prediction") if n in selection.names]
    out: dict[str, str | Exception] = {}
    if not wanted:
        return out
    if query_mode == "single":
        try:
            text = backends.llm.generate(
                prompts.render_combined_prompt(model.labels), png, INFERENCE_TEMPERATURE
            )
            desc, pred = prompts.split_combined_response(text)
            out.update(description=desc, prediction=pred)
        except BackendError as exc:
            out.update(description=exc, prediction=exc)
        return {n: out[n] for n in wanted}
    requests = {
        "description": prompts.render_description_prompt(),
        "prediction": prompts.render_classification_prompt(model.labels),
    }
    for name in wanted:
        try:
            out[name] = backends.llm.generate(requests[name], png, INFERENCE_TEMPERATURE)
        except BackendError as exc:
            out[name] = exc
    return out


def features_from_png(
    png: bytes,
    model: ClassifierModel,
    selection: FeatureSelection,
    backends: Backends,
    degraded: bool = False,
    query_mode: str = "dual",
) -> tuple[QueryFeatures, list[str]]:
    """Compute the selected features for an already-preprocessed image.

    Returns the features and the names of features skipped in degraded mode.
    """
    if query_mode not in QUERY_MODES:
        raise ValueError(f"query_mode must be one of {QUERY_MODES}")
    feats = QueryFeatures()
    skipped: list[str] = []
    failures: dict[str, Exception] = {}

    if selection.use_image:
        try:
            feats.image_feature = normalize(backends.encoder.encode_image(png))
        except BackendError as exc:
            failures["image"] = exc

    for name, text in _llm_texts(png, model, selection, backends, query_mode).items():
        if isinstance(text, Exception):
            failures[name] = text
            continue
        setattr(feats, f"{name}_text", text)
        try:
            setattr(feats, f"{name}_feature", normalize(backends.encoder.encode_text(text)))
        except BackendError as exc:
            failures[name] = exc

    for name in selection.names:
        if name not in failures:
            continue
        if not degraded:
            raise failures[name]
        logger.warning("skipping %s feature: %s", name, failures[name])
        skipped.append(name)
    if len(skipped) == len(selection.names):
        raise NoFeaturesAvailableError(f"all selected features failed: {skipped}")
    return feats, skipped


def extract_features(
    image: bytes,
    model: ClassifierModel,
    selection: FeatureSelection,
    backends: Backends,
    degraded: bool = False,
    query_mode: str = "dual",
    image_size: int = images.IMAGE_SIZE,
) -> QueryFeatures:
    _, png = images.preprocess(image, image_size)
    feats, _ = features_from_png(png, model, selection, backends, degraded, query_mode)
    return feats


def fuse_scores(features: Sequence[np.ndarray], matrix: np.ndarray, strategy: FusionStrategy) -> np.ndarray:
    """Combine per-feature evidence into one score per class."""
    if len(features) == 0:
        raise NoFeaturesAvailableError("no features to score")
    strategy = FusionStrategy(strategy)
    if strategy is FusionStrategy.AVERAGE_FEATURE:
        return score(fuse_average(features), matrix)
    sims = [score(f, matrix) for f in features]
    if strategy is FusionStrategy.MAX_SIMILARITY:
        return np.maximum.reduce(sims)
    total = np.zeros_like(sims[0])
    for s in sims:
        total += s
    return total / len(sims)


def check_dims(model: ClassifierModel, backends: Backends) -> None:
    dim = backends.encoder.dim
    if dim is not None and dim != model.dim:
        raise DimMismatchError(f"model dim {model.dim} != encoder dim {dim}")


def predict_from_features(
    features: QueryFeatures,
    model: ClassifierModel,
    strategy: FusionStrategy,
    skipped: Iterable[str] = (),
) -> Prediction:
    vecs = [f for _, f in features.present()]
    scores = fuse_scores(vecs, model.matrix, strategy)
    idx = argmax_index(scores)
    return Prediction(idx, model.labels[idx], scores, features, list(skipped))


def classify(
    image: bytes,
    model: ClassifierModel,
    selection: FeatureSelection,
    strategy: FusionStrategy,
    backends: Backends,
    degraded: bool = False,
    query_mode: str = "dual",
    image_size: int = images.IMAGE_SIZE,
) -> Prediction:
    check_dims(model, backends)
    _, png = images.preprocess(image, image_size)
    feats, skipped = features_from_png(png, model, selection, backends, degraded, query_mode)
    return predict_from_features(feats, model, strategy, skipped)


def _source_name(src: Any) -> str:
    return "<bytes>" if isinstance(src, (bytes, bytearray)) else str(src)


def classify_batch(
    manifest: Any,
    model: ClassifierModel,
    selection: FeatureSelection,
    strategy: FusionStrategy,
    backends: Backends,
    parallelism: int = 8,
    degraded: bool = False,
    query_mode: str = "dual",
    image_size: int = images.IMAGE_SIZE,
) -> list[Prediction | PredictionFailure]:
    """Classify every image of a manifest (or a plain sequence of paths/bytes).

    Results come back in input order; a failing record yields a
    :class:`PredictionFailure` instead of aborting the batch.
    """
    if hasattr(manifest, "records"):
        sources = [str(manifest.image_path(r)) for r in manifest.records]
    else:
        sources = list(manifest)
    check_dims(model, backends)

    def one(pair: tuple[int, Any]) -> Prediction | PredictionFailure:
        i, src = pair
        try:
            data = bytes(src) if isinstance(src, (bytes, bytearray)) else images.read_image(Path(src))
            return classify(data, model, selection, strategy, backends, degraded, query_mode, image_size)
        except ZsfuseError as exc:
            logger.warning("record %d (%s) failed: %s", i, _source_name(src), exc)
            return PredictionFailure(i, _source_name(src), type(exc).__name__, str(exc))

    if parallelism <= 1:
        return [one(p) for p in enumerate(sources)]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, enumerate(sources)))
