"""Match the LLM's raw class-prediction text directly against the label set.

These are the alternatives to feature fusion: ROUGE-N F1, ROUGE-L F1, and
cosine similarity of text encodings.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backends import EncoderBackend
from .errors import EmptyLabelSetError
from .vectors import argmax_index, normalize

_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN.findall(text.lower())


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap: int, n_candidate: int, n_reference: int) -> float:
    if n_candidate == 0 or n_reference == 0 or overlap == 0:
        return 0.0
    p = overlap / n_candidate
    r = overlap / n_reference
    return 2 * p * r / (p + r)


def rouge_n_f1(candidate: Sequence[str], reference: Sequence[str], n: int = 1) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    cand, ref = _ngrams(candidate, n), _ngrams(reference, n)
    overlap = sum((cand & ref).values())
    return _f1(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_f1(candidate: Sequence[str], reference: Sequence[str]) -> float:
    return _f1(lcs_length(candidate, reference), len(candidate), len(reference))


@dataclass(frozen=True)
class MatchMetric:
    """``rouge_n`` (with ``n``), ``rouge_l``, or ``embedding``."""

    kind: str
    n: int = 1

    @classmethod
    def parse(cls, name: str) -> "MatchMetric":
        """Accepts CLI names: ``rouge1``, ``rouge2``, ..., ``rougeL``, ``embed``."""
        if name == "rougeL":
            return cls("rouge_l")
        if name == "embed":
            return cls("embedding")
        m = re.fullmatch(r"rouge(\d+)", name)
        if m and int(m.group(1)) >= 1:
            return cls("rouge_n", int(m.group(1)))
        raise ValueError(f"unknown baseline metric {name!r}")

    @property
    def name(self) -> str:
        return {"rouge_l": "rougeL", "embedding": "embed"}.get(self.kind, f"rouge{self.n}")


@dataclass(frozen=True)
class MatchResult:
    class_index: int
    score: float
    metric: MatchMetric
    scores: tuple[float, ...]


def label_scores(
    prediction_text: str,
    labels: Sequence[str],
    metric: MatchMetric,
    encoder: EncoderBackend | None = None,
) -> np.ndarray:
    """Score the prediction text against every label under ``metric``."""
    if len(labels) == 0:
        raise EmptyLabelSetError("no labels to match against")
    if metric.kind == "embedding":
        if encoder is None:
            raise ValueError("embedding matching needs an encoder")
        query = normalize(encoder.encode_text(prediction_text))
        return np.array([float(query @ normalize(encoder.encode_text(lab))) for lab in labels])
    if encoder is not None:
        raise ValueError("ROUGE matching takes no encoder")
    cand = tokenize(prediction_text)
    if metric.kind == "rouge_n":
        return np.array([rouge_n_f1(cand, tokenize(lab), metric.n) for lab in labels])
    if metric.kind == "rouge_l":
        return np.array([rouge_l_f1(cand, tokenize(lab)) for lab in labels])
    raise ValueError(f"unknown metric kind {metric.kind!r}")


def match_prediction(
    prediction_text: str,
    labels: Sequence[str],
    metric: MatchMetric,
    encoder: EncoderBackend | None = None,
) -> MatchResult:
    scores = label_scores(prediction_text, labels, metric, encoder)
    idx = argmax_index(scores)
    return MatchResult(idx, float(scores[idx]), metric, tuple(float(s) for s in scores))
