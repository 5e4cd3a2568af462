"""Fixed LLM prompts and per-dataset class-label templates.

The prompt bodies ship as a versioned JSON asset (``assets/prompts.json``) so
the exact bytes sent to the LLM can be audited and pinned.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .errors import EmptyLabelError, EmptyLabelSetError, ProtocolError

CLASSES = "{classes}"
CLASS_LABEL = "{class_label}"
LABEL_JOIN = ", "


@lru_cache(maxsize=1)
def _asset() -> dict:
    raw = resources.files("zsfuse").joinpath("assets/prompts.json").read_text(encoding="utf-8")
    return json.loads(raw)


def asset_version() -> str:
    return _asset()["version"]


def classification_body() -> str:
    return _asset()["classification"]


def description_body() -> str:
    return _asset()["description"]


def class_description_bodies() -> list[str]:
    return list(_asset()["class_descriptions"])


@dataclass(frozen=True)
class LabelTemplate:
    """A class-label text pattern such as ``"A photo of {class_label}"``."""

    pattern: str
    dataset_tag: str | None = None

    def __post_init__(self):
        if self.pattern.count(CLASS_LABEL) != 1:
            raise ValueError(f"label template must contain exactly one {CLASS_LABEL}: {self.pattern!r}")


DEFAULT_TEMPLATE = LabelTemplate(_asset()["label_templates"]["default"])


def dataset_template(tag: str) -> LabelTemplate:
    """Look up one of the shipped per-dataset templates (``pets``, ``dtd``, ``cars``)."""
    patterns = _asset()["label_templates"]
    try:
        return LabelTemplate(patterns[tag], dataset_tag=None if tag == "default" else tag)
    except KeyError:
        raise KeyError(f"unknown dataset template {tag!r}; known: {sorted(patterns)}") from None


def _check_label(label: str) -> str:
    if not isinstance(label, str) or not label:
        raise EmptyLabelError("class label must be a non-empty string")
    return label


def render_classification_prompt(labels: Sequence[str]) -> str:
    if len(labels) == 0:
        raise EmptyLabelSetError("classification prompt needs at least one label")
    for label in labels:
        _check_label(label)
    return classification_body().replace(CLASSES, LABEL_JOIN.join(labels))


def render_description_prompt() -> str:
    return description_body()


def render_class_description_prompts(label: str) -> list[str]:
    _check_label(label)
    return [body.replace(CLASS_LABEL, label) for body in class_description_bodies()]


def render_label_template(template: LabelTemplate, label: str) -> str:
    _check_label(label)
    return template.pattern.replace(CLASS_LABEL, label)


def render_combined_prompt(labels: Sequence[str]) -> str:
    """Description and classification requests merged into one LLM query."""
    return "\n".join(
        [render_description_prompt(), render_classification_prompt(labels), _asset()["combined_query_suffix"]]
    )


_CLASS_LINE = re.compile(r"^\s*class\s*:\s*", re.IGNORECASE | re.MULTILINE)
_DESC_PREFIX = re.compile(r"^\s*description\s*:\s*", re.IGNORECASE)


def split_combined_response(text: str) -> tuple[str, str]:
    """Split a combined-query answer into ``(description, prediction)``."""
    match = None
    for match in _CLASS_LINE.finditer(text):
        pass
    if match is None:
        raise ProtocolError("combined response has no 'Class:' line")
    description = _DESC_PREFIX.sub("", text[: match.start()]).strip()
    prediction = text[match.end():].strip()
    if not description or not prediction:
        raise ProtocolError("combined response is missing a description or a class")
    return description, prediction
