"""Occlusion attribution over image patches and over words of the LLM texts.

Each input is perturbed while the other two are held at their unmasked
values; importance is the drop in the unmasked winner's similarity score.
Image kernels grow (50 -> 100 -> ... -> 200 px by default) and text windows
shrink (3 -> 2 -> 1 words) until some position exceeds the highlight threshold.
"""

from __future__ import annotations

import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
from PIL import Image

from . import images
from .backends import Backends
from .classifier import ClassifierModel
from .errors import DegenerateImageError
from .pipeline import (
    FeatureSelection,
    FusionStrategy,
    QueryFeatures,
    check_dims,
    features_from_png,
    fuse_scores,
)
from .vectors import argmax_index, normalize

FILL_VALUE = 128
HIGHLIGHT_THRESHOLD = 0.01
TINT = np.array([255.0, 0.0, 0.0])
TINT_ALPHA = 0.5
TEXT_ROLES = ("description", "prediction")


@dataclass(frozen=True)
class ImageMaskSchedule:
    kernel: int = 50
    stride: int = 10
    growth: int = 50
    max_kernel: int = 200

    def __post_init__(self):
        if not 0 < self.kernel <= self.max_kernel:
            raise ValueError("need 0 < kernel <= max_kernel")
        if self.stride < 1 or self.growth < 1:
            raise ValueError("stride and growth must be >= 1")

    @property
    def max_rounds(self) -> int:
        return math.ceil((self.max_kernel - self.kernel) / self.growth) + 1


@dataclass(frozen=True)
class TextMaskSchedule:
    start_width: int = 3
    min_width: int = 1

    def __post_init__(self):
        if not self.start_width >= self.min_width >= 1:
            raise ValueError("need start_width >= min_width >= 1")


@dataclass
class AttributionContext:
    """The unmasked run that every perturbation is compared against."""

    pixels: np.ndarray
    features: QueryFeatures
    baseline_index: int
    baseline_score: float
    strategy: FusionStrategy


@dataclass
class RoundInfo:
    size: int
    positions: int
    rescoring_calls: int
    highlighted: bool


@dataclass
class ImageAttribution:
    grid: list[list[float]]
    flips: list[list[bool]]
    kernel_used: int
    stride: int
    rounds: list[RoundInfo]

    @property
    def highlighted(self) -> bool:
        return bool(self.rounds) and self.rounds[-1].highlighted


@dataclass
class TextAttribution:
    role: str
    words: list[str]
    importances: list[float]
    width_used: int
    rounds: list[RoundInfo] = field(default_factory=list)

    @property
    def highlighted(self) -> bool:
        return bool(self.rounds) and self.rounds[-1].highlighted


@dataclass
class AttributionMap:
    baseline_index: int
    baseline_score: float
    image: ImageAttribution
    texts: dict[str, TextAttribution]
    threshold: float = HIGHLIGHT_THRESHOLD
    fill: int = FILL_VALUE

    def to_sidecar(self) -> dict[str, Any]:
        return {
            "grid": self.image.grid,
            "kernel_used": self.image.kernel_used,
            "tokens": {r: t.importances for r, t in self.texts.items()},
            "baseline_index": self.baseline_index,
            "baseline_score": self.baseline_score,
            "stride": self.image.stride,
            "flips": self.image.flips,
            "image_rounds": [asdict(r) for r in self.image.rounds],
            "words": {r: t.words for r, t in self.texts.items()},
            "text_width_used": {r: t.width_used for r, t in self.texts.items()},
            "text_rounds": {r: [asdict(x) for x in t.rounds] for r, t in self.texts.items()},
            "threshold": self.threshold,
            "fill": self.fill,
        }

    @classmethod
    def from_sidecar(cls, d: dict[str, Any]) -> "AttributionMap":
        image = ImageAttribution(
            grid=d["grid"],
            flips=d["flips"],
            kernel_used=d["kernel_used"],
            stride=d["stride"],
            rounds=[RoundInfo(**r) for r in d["image_rounds"]],
        )
        texts = {
            role: TextAttribution(
                role, d["words"][role], d["tokens"][role], d["text_width_used"][role],
                [RoundInfo(**r) for r in d["text_rounds"][role]],
            )
            for role in d["tokens"]
        }
        return cls(d["baseline_index"], d["baseline_score"], image, texts, d["threshold"], d["fill"])

    def sidecar_json(self) -> str:
        return json.dumps(self.to_sidecar(), indent=2, ensure_ascii=False) + "\n"

    def top_words(self, role: str, n: int = 5) -> list[tuple[str, float]]:
        t = self.texts.get(role)
        if t is None:
            return []
        order = sorted(range(len(t.words)), key=lambda i: (-t.importances[i], i))
        return [(t.words[i], t.importances[i]) for i in order[:n]]


def kernel_positions(length: int, kernel: int, stride: int) -> list[int]:
    """Start offsets covering ``length``; the last patch may run past the edge and is clipped."""
    n = math.ceil(max(length - kernel, 0) / stride) + 1
    return [i * stride for i in range(n)]


def prepare_context(
    image: bytes,
    model: ClassifierModel,
    backends: Backends,
    strategy: FusionStrategy = FusionStrategy.AVERAGE_FEATURE,
    image_size: int = images.IMAGE_SIZE,
) -> AttributionContext:
    """Run the unmasked three-feature classification once."""
    check_dims(model, backends)
    pixels, png = images.preprocess(image, image_size)
    feats, _ = features_from_png(png, model, FeatureSelection(), backends)
    scores = fuse_scores([f for _, f in feats.present()], model.matrix, strategy)
    idx = argmax_index(scores)
    return AttributionContext(pixels, feats, idx, float(scores[idx]), strategy)


def _rescore(ctx: AttributionContext, model: ClassifierModel, **override) -> np.ndarray:
    """Scores with one feature replaced (or dropped when set to ``None``)."""
    f = ctx.features
    current = {"image": f.image_feature, "description": f.description_feature, "prediction": f.prediction_feature}
    current.update(override)
    vecs = [v for v in current.values() if v is not None]
    return fuse_scores(vecs, model.matrix, ctx.strategy)


def attribute_image(
    image: bytes,
    model: ClassifierModel,
    backends: Backends,
    schedule: ImageMaskSchedule = ImageMaskSchedule(),
    threshold: float = HIGHLIGHT_THRESHOLD,
    fill: int = FILL_VALUE,
    context: AttributionContext | None = None,
    parallelism: int = 1,
) -> ImageAttribution:
    """Slide a fill-colored square over the image and record score drops.

    Only the image feature is recomputed per position; the description and
    prediction features come from the unmasked run.
    """
    ctx = context or prepare_context(image, model, backends)
    pixels = ctx.pixels
    h, w = pixels.shape[:2]
    if h < schedule.kernel or w < schedule.kernel:
        raise DegenerateImageError(f"image {w}x{h} is smaller than kernel {schedule.kernel}")
    b = ctx.baseline_index

    def one(pos: tuple[int, int]) -> tuple[float, bool]:
        y, x = pos
        masked = pixels.copy()
        masked[y:y + kernel, x:x + kernel] = fill
        feat = normalize(backends.encoder.encode_image(images.to_png(masked)))
        scores = _rescore(ctx, model, image=feat)
        return ctx.baseline_score - float(scores[b]), argmax_index(scores) != b

    kernel = schedule.kernel
    rounds: list[RoundInfo] = []
    while True:
        ys, xs = kernel_positions(h, kernel, schedule.stride), kernel_positions(w, kernel, schedule.stride)
        positions = [(y, x) for y in ys for x in xs]
        if parallelism > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                results = list(pool.map(one, positions))
        else:
            results = [one(p) for p in positions]
        grid = np.array([r[0] for r in results]).reshape(len(ys), len(xs))
        flips = np.array([r[1] for r in results]).reshape(len(ys), len(xs))
        hot = bool(np.any(grid > threshold))
        rounds.append(RoundInfo(kernel, len(positions), len(results), hot))
        if hot or kernel >= schedule.max_kernel:
            break
        kernel = min(kernel + schedule.growth, schedule.max_kernel)
    return ImageAttribution(grid.tolist(), flips.tolist(), kernel, schedule.stride, rounds)


def attribute_text(
    text: str | None,
    role: str,
    model: ClassifierModel,
    backends: Backends,
    schedule: TextMaskSchedule = TextMaskSchedule(),
    threshold: float = HIGHLIGHT_THRESHOLD,
    context: AttributionContext | None = None,
    image: bytes | None = None,
) -> TextAttribution:
    """Remove sliding windows of words from one LLM text and record score drops.

    A word's importance is the largest drop over all windows that cover it.
    Removing every word drops that text feature from the fusion altogether.
    """
    if role not in TEXT_ROLES:
        raise ValueError(f"role must be one of {TEXT_ROLES}")
    if context is None:
        if image is None:
            raise ValueError("need either an attribution context or the image")
        context = prepare_context(image, model, backends)
    ctx = context
    if text is None:
        text = getattr(ctx.features, f"{role}_text") or ""
    words = text.split()
    if not words:
        return TextAttribution(role, [], [], schedule.min_width)
    b = ctx.baseline_index
    width = schedule.start_width
    rounds: list[RoundInfo] = []
    while True:
        span = min(width, len(words))
        imp = [-math.inf] * len(words)
        starts = range(len(words) - span + 1)
        for s in starts:
            remaining = words[:s] + words[s + span:]
            feat = normalize(backends.encoder.encode_text(" ".join(remaining))) if remaining else None
            scores = _rescore(ctx, model, **{role: feat})
            drop = ctx.baseline_score - float(scores[b])
            for i in range(s, s + span):
                imp[i] = max(imp[i], drop)
        hot = any(v > threshold for v in imp)
        rounds.append(RoundInfo(width, len(starts), len(starts), hot))
        if hot or width <= schedule.min_width:
            break
        width -= 1
    return TextAttribution(role, words, imp, width, rounds)


def attribute(
    image: bytes,
    model: ClassifierModel,
    backends: Backends,
    image_schedule: ImageMaskSchedule = ImageMaskSchedule(),
    text_schedule: TextMaskSchedule = TextMaskSchedule(),
    threshold: float = HIGHLIGHT_THRESHOLD,
    fill: int = FILL_VALUE,
    parallelism: int = 1,
    image_size: int = images.IMAGE_SIZE,
) -> tuple[AttributionMap, np.ndarray]:
    """Full attribution; returns the map and the preprocessed pixels it refers to."""
    ctx = prepare_context(image, model, backends, image_size=image_size)
    img = attribute_image(image, model, backends, image_schedule, threshold, fill, ctx, parallelism)
    texts = {
        role: attribute_text(None, role, model, backends, text_schedule, threshold, ctx)
        for role in TEXT_ROLES
    }
    return AttributionMap(ctx.baseline_index, ctx.baseline_score, img, texts, threshold, fill), ctx.pixels


def heat_mask(grid: Sequence[Sequence[float]], shape: tuple[int, int], kernel: int, stride: int) -> np.ndarray:
    """Per-pixel heat in [0, 1]: max positive importance over patches covering the pixel."""
    g = np.clip(np.asarray(grid, dtype=np.float64), 0.0, None)
    heat = np.zeros(shape, dtype=np.float64)
    top = g.max() if g.size else 0.0
    if top <= 0:
        return heat
    for r, row in enumerate(g):
        for c, v in enumerate(row):
            if v > 0:
                y, x = r * stride, c * stride
                patch = heat[y:y + kernel, x:x + kernel]
                np.maximum(patch, v / top, out=patch)
    return heat


def render_heatmap(amap: AttributionMap, pixels: np.ndarray) -> bytes:
    """Alpha-blend a red tint proportional to importance; returns PNG bytes."""
    h, w = pixels.shape[:2]
    rows, cols = len(amap.image.grid), len(amap.image.grid[0]) if amap.image.grid else 0
    if rows != len(kernel_positions(h, amap.image.kernel_used, amap.image.stride)) or cols != len(
        kernel_positions(w, amap.image.kernel_used, amap.image.stride)
    ):
        raise ValueError("attribution grid does not match the image size")
    a = TINT_ALPHA * heat_mask(amap.image.grid, (h, w), amap.image.kernel_used, amap.image.stride)[..., None]
    out = pixels.astype(np.float64) * (1.0 - a) + TINT * a
    buf = io.BytesIO()
    Image.fromarray(np.clip(np.rint(out), 0, 255).astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()
