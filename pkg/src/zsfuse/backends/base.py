"""Backend capability contracts and boundary checks."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from ..errors import InvalidVectorError, ProtocolError, TooShortError
from ..vectors import as_vector

logger = logging.getLogger(__name__)


@runtime_checkable
class EncoderBackend(Protocol):
    """Cross-modal encoder pair: ``encode_text`` and ``encode_image`` share one space."""

    identity: str

    @property
    def dim(self) -> int | None: ...

    @property
    def max_text_chars(self) -> int | None: ...

    def encode_text(self, text: str) -> np.ndarray: ...

    def encode_image(self, image: bytes) -> np.ndarray: ...


@runtime_checkable
class LLMBackend(Protocol):
    """Multimodal LLM.

    ``sample`` distinguishes repeated requests at non-zero temperature so that
    caches and deterministic doubles do not collapse them into one response.
    It is not sent over the wire.
    """

    identity: str

    def generate(
        self, prompt: str, image: bytes | None = None, temperature: float = 0.0, sample: int = 0
    ) -> str: ...


@dataclass
class CallCounters:
    """Delegate-call and cache-hit counters, safe to bump from many threads."""

    encode_text_calls: int = 0
    encode_image_calls: int = 0
    generate_calls: int = 0
    cache_hits: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self, name: str, by: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + by)

    @property
    def network_calls(self) -> int:
        return self.encode_text_calls + self.encode_image_calls + self.generate_calls

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {
                "encode_text_calls": self.encode_text_calls,
                "encode_image_calls": self.encode_image_calls,
                "generate_calls": self.generate_calls,
                "cache_hits": self.cache_hits,
            }


def prepare_text(text: str, max_chars: int | None) -> str:
    """Reject blank text and truncate over-budget text with a warning."""
    if not isinstance(text, str) or not text.strip():
        raise TooShortError("text is empty after whitespace trimming")
    if max_chars is not None and len(text) > max_chars:
        logger.warning("truncating text from %d to %d characters", len(text), max_chars)
        text = text[:max_chars]
    return text


def check_embedding(values, dim: int | None) -> np.ndarray:
    """Enforce embedding invariants on backend output; violations are protocol errors."""
    try:
        return as_vector(values, dim)
    except (InvalidVectorError, ValueError, TypeError) as exc:
        raise ProtocolError(f"invalid embedding from backend: {exc}") from exc


def check_temperature(temperature: float) -> float:
    t = float(temperature)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"temperature must be in [0, 1], got {temperature}")
    return t
