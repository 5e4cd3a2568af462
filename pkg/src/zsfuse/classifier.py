"""Zero-shot linear classifier construction.

A classifier is an ``(n, m)`` matrix whose columns are unit-norm class
features, built from one of four class representations:

* ``labels``       -- the raw class-label text
* ``template``     -- a label template such as ``"A photo of {class_label}"``
* ``descriptions`` -- the mean encoding of ``k`` LLM-written class descriptions
* ``combined``     -- the normalized sum of the three above
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import prompts
from .backends import Backends, EncoderBackend, LLMBackend
from .errors import (
    BackendError,
    DimMismatchError,
    DuplicateLabelError,
    EmptyLabelError,
    EmptyLabelSetError,
    ModelFormatError,
    PartialGenerationError,
    ZsfuseError,
)
from .prompts import DEFAULT_TEMPLATE, LabelTemplate
from .vectors import as_vector, normalize, stack_columns

DESCRIPTION_TEMPERATURE = 0.99
DEFAULT_K = 50
DEFAULT_PARALLELISM = 8
MODES = ("labels", "template", "descriptions", "combined")

MAGIC = b"ZSFMODEL"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sHI")
_DTYPES = ("<f8", "<f4")


class ClassifierBuildError(ZsfuseError):
    """Building the feature for one class label failed."""

    def __init__(self, label: str, cause: BaseException):
        self.label = label
        self.cause = cause
        super().__init__(f"building class {label!r} failed: {type(cause).__name__}: {cause}")


@dataclass(frozen=True)
class ClassFeatureMode:
    kind: str = "combined"
    k: int = DEFAULT_K
    template: LabelTemplate = DEFAULT_TEMPLATE

    def __post_init__(self):
        if self.kind not in MODES:
            raise ValueError(f"unknown class feature mode {self.kind!r}; expected one of {MODES}")
        if self.uses_descriptions:
            n_prompts = len(prompts.class_description_bodies())
            if self.k < n_prompts or self.k % n_prompts:
                raise ValueError(f"k must be a positive multiple of {n_prompts}, got {self.k}")

    @property
    def uses_descriptions(self) -> bool:
        return self.kind in ("descriptions", "combined")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind}
        if self.uses_descriptions:
            out["k"] = self.k
        if self.kind in ("template", "combined"):
            out["template"] = self.template.pattern
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ClassFeatureMode":
        template = LabelTemplate(d["template"]) if "template" in d else DEFAULT_TEMPLATE
        return cls(d["kind"], d.get("k", DEFAULT_K), template)


@dataclass(frozen=True)
class ClassifierModel:
    matrix: np.ndarray
    labels: tuple[str, ...]
    mode: ClassFeatureMode
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[1] != len(self.labels):
            raise DimMismatchError(
                f"matrix shape {self.matrix.shape} does not match {len(self.labels)} labels"
            )
        check_labels(self.labels)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def m(self) -> int:
        return int(self.matrix.shape[1])

    def column(self, i: int) -> np.ndarray:
        return self.matrix[:, i]

    def to_bytes(self, dtype: str = "<f8") -> bytes:
        """Binary container: preamble, JSON header, then column-major values."""
        if dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {_DTYPES}")
        header = json.dumps(
            {
                "labels": list(self.labels),
                "mode": self.mode.to_dict(),
                "provenance": self.provenance,
                "dim": self.dim,
                "m": self.m,
                "dtype": dtype,
            },
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
        ).encode("utf-8")
        body = np.ascontiguousarray(self.matrix.T, dtype=dtype).tobytes()
        return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)) + header + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "ClassifierModel":
        if len(data) < _PREAMBLE.size:
            raise ModelFormatError("file too short")
        magic, version, hlen = _PREAMBLE.unpack_from(data)
        if magic != MAGIC:
            raise ModelFormatError("not a zsfuse model file")
        if version != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported model format version {version}")
        start = _PREAMBLE.size
        try:
            header = json.loads(data[start:start + hlen].decode("utf-8"))
            dim, m, dtype = int(header["dim"]), int(header["m"]), header["dtype"]
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise ModelFormatError(f"bad header: {exc}") from exc
        if dtype not in _DTYPES:
            raise ModelFormatError(f"bad dtype {dtype!r}")
        body = data[start + hlen:]
        if len(body) != dim * m * np.dtype(dtype).itemsize:
            raise ModelFormatError("matrix payload size does not match header")
        cols = np.frombuffer(body, dtype=dtype).astype(np.float64).reshape(m, dim)
        return cls(
            matrix=np.ascontiguousarray(cols.T),
            labels=tuple(header["labels"]),
            mode=ClassFeatureMode.from_dict(header["mode"]),
            provenance=dict(header["provenance"]),
        )

    def save(self, path: str | Path, dtype: str = "<f8") -> None:
        Path(path).write_bytes(self.to_bytes(dtype))

    @classmethod
    def load(cls, path: str | Path) -> "ClassifierModel":
        return cls.from_bytes(Path(path).read_bytes())


def check_labels(labels: Sequence[str]) -> None:
    if len(labels) == 0:
        raise EmptyLabelSetError("at least one class label is required")
    seen = set()
    for label in labels:
        if not isinstance(label, str) or not label:
            raise EmptyLabelError("class labels must be non-empty strings")
        if label in seen:
            raise DuplicateLabelError(label)
        seen.add(label)


def build_label_feature(label: str, encoder: EncoderBackend) -> np.ndarray:
    if not label:
        raise EmptyLabelError("class label must be non-empty")
    return normalize(encoder.encode_text(label))


def build_template_feature(label: str, template: LabelTemplate, encoder: EncoderBackend) -> np.ndarray:
    return normalize(encoder.encode_text(prompts.render_label_template(template, label)))


def description_mean(label: str, k: int, llm: LLMBackend, encoder: EncoderBackend) -> np.ndarray:
    """Mean of the raw (unnormalized) encodings of ``k`` LLM class descriptions.

    Each of the five description prompts is sampled ``k / 5`` times at
    temperature 0.99. Responses are encoded as-is and averaged without
    per-description normalization.

    Raises:
        PartialGenerationError: if any generation or encoding failed.
    """
    bodies = prompts.render_class_description_prompts(label)
    if k < len(bodies) or k % len(bodies):
        raise ValueError(f"k must be a positive multiple of {len(bodies)}, got {k}")
    total: np.ndarray | None = None
    failed: set[int] = set()
    obtained = 0
    for sample in range(k // len(bodies)):
        for number, prompt in enumerate(bodies, start=1):
            try:
                text = llm.generate(prompt, None, DESCRIPTION_TEMPERATURE, sample)
                vec = encoder.encode_text(text)
            except BackendError:
                failed.add(number)
                continue
            total = vec.copy() if total is None else total + vec
            obtained += 1
    if obtained < k or total is None:
        raise PartialGenerationError(label, sorted(failed), obtained, k)
    return total / k


def build_description_feature(label: str, k: int, llm: LLMBackend, encoder: EncoderBackend) -> np.ndarray:
    return normalize(description_mean(label, k, llm, encoder))


def build_combined_feature(
    label_feat: np.ndarray, template_feat: np.ndarray, description_feat: np.ndarray
) -> np.ndarray:
    """``normalize(label_feat + template_feat + description_feat)``.

    ``description_feat`` is the raw description mean, not its normalized form.
    """
    parts = [as_vector(p) for p in (label_feat, template_feat, description_feat)]
    if len({p.size for p in parts}) != 1:
        raise DimMismatchError(f"combined parts have dims {[p.size for p in parts]}")
    return normalize(parts[0] + parts[1] + parts[2])


def build_class_feature(label: str, mode: ClassFeatureMode, backends: Backends) -> np.ndarray:
    enc, llm = backends.encoder, backends.llm
    if mode.kind == "labels":
        return build_label_feature(label, enc)
    if mode.kind == "template":
        return build_template_feature(label, mode.template, enc)
    if mode.kind == "descriptions":
        return build_description_feature(label, mode.k, llm, enc)
    return build_combined_feature(
        build_label_feature(label, enc),
        build_template_feature(label, mode.template, enc),
        description_mean(label, mode.k, llm, enc),
    )


def build_classifier(
    labels: Sequence[str],
    mode: ClassFeatureMode,
    backends: Backends,
    parallelism: int = DEFAULT_PARALLELISM,
) -> ClassifierModel:
    """Build one column per label, preserving label order."""
    labels = tuple(labels)
    check_labels(labels)

    def one(label: str) -> np.ndarray:
        try:
            return build_class_feature(label, mode, backends)
        except ZsfuseError as exc:
            raise ClassifierBuildError(label, exc) from exc

    if parallelism <= 1:
        columns = [one(label) for label in labels]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            columns = list(pool.map(one, labels))
    provenance = {
        "backend": backends.identity,
        "prompt_asset_version": prompts.asset_version(),
    }
    return ClassifierModel(stack_columns(columns), labels, mode, provenance)
