"""Deterministic offline doubles for the encoder pair and the LLM.

Both are pure: identical requests always give identical answers, and the only
I/O is an optional read of a JSON fixture file.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .. import images
from ..errors import SafetyRefusalError
from ..vectors import normalize
from .base import check_embedding, check_temperature, prepare_text

DEFAULT_MOCK_DIM = 512

ImageFn = Callable[[np.ndarray], "np.ndarray | None"]
Responder = Callable[[str, "bytes | None", float, int], "str | None"]


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class MockEncoder:
    """Hash-seeded pseudorandom embeddings.

    Unknown inputs map to ``normalize(uniform(-1, 1, dim))`` drawn from a
    generator seeded by a keyed BLAKE2b digest of the input bytes. Fixture
    tables override specific texts (by exact string) or images (by SHA-256 of
    their bytes); ``image_fn`` can inspect decoded pixels for content-aware
    fixtures and return ``None`` to fall through to the hash.
    """

    def __init__(
        self,
        dim: int = DEFAULT_MOCK_DIM,
        seed: int = 0,
        text_fixtures: Mapping[str, Sequence[float]] | None = None,
        image_fixtures: Mapping[str, Sequence[float]] | None = None,
        image_fn: ImageFn | None = None,
        max_text_chars: int | None = None,
    ):
        if dim < 1:
            raise ValueError("dim must be positive")
        self._dim = dim
        self.seed = seed
        self._max_text_chars = max_text_chars
        self.text_fixtures = {k: check_embedding(v, dim) for k, v in (text_fixtures or {}).items()}
        self.image_fixtures = {k: check_embedding(v, dim) for k, v in (image_fixtures or {}).items()}
        self.image_fn = image_fn
        fx = hashlib.sha256()
        for table in (self.text_fixtures, self.image_fixtures):
            for k in sorted(table):
                fx.update(k.encode("utf-8") + table[k].tobytes())
        fn = "" if image_fn is None else f":fn={getattr(image_fn, '__name__', 'fn')}"
        self.identity = f"mock-encoder:dim={dim}:seed={seed}:fx={fx.hexdigest()[:12]}{fn}"

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def max_text_chars(self) -> int | None:
        return self._max_text_chars

    def _hash_vector(self, modality: bytes, data: bytes) -> np.ndarray:
        key = self.seed.to_bytes(8, "little", signed=True)
        h = hashlib.blake2b(modality + b"\x00" + data, key=key, digest_size=32).digest()
        rng = np.random.default_rng(int.from_bytes(h, "little"))
        return normalize(rng.uniform(-1.0, 1.0, self._dim))

    def encode_text(self, text: str) -> np.ndarray:
        text = prepare_text(text, self._max_text_chars)
        if text in self.text_fixtures:
            return self.text_fixtures[text].copy()
        return self._hash_vector(b"text", text.encode("utf-8"))

    def encode_image(self, image: bytes) -> np.ndarray:
        fixed = self.image_fixtures.get(digest(image))
        if fixed is not None:
            return fixed.copy()
        if self.image_fn is not None:
            out = self.image_fn(images.decode(image))
            if out is not None:
                return check_embedding(out, self._dim)
        return self._hash_vector(b"image", image)


class MockLLM:
    """Fixture-table LLM.

    Fixtures are keyed by ``sha256(prompt_bytes + image_bytes)`` (see
    :meth:`key`). A value may be a string, a list of variants, or ``None`` to
    simulate a safety refusal. At temperature 0 variant 0 is always returned;
    above 0 the ``sample`` number picks the variant. Unmapped requests answer
    ``mock-response-<6 hex digits>``.
    """

    def __init__(
        self,
        fixtures: Mapping[str, "str | Sequence[str] | None"] | None = None,
        responder: Responder | None = None,
    ):
        self.fixtures = dict(fixtures or {})
        self.responder = responder

    @property
    def identity(self) -> str:
        fx = digest(json.dumps(self.fixtures, sort_keys=True).encode("utf-8"))
        fn = "" if self.responder is None else f":fn={getattr(self.responder, '__name__', 'fn')}"
        return f"mock-llm:v1:fx={fx[:12]}{fn}"

    @staticmethod
    def key(prompt: str, image: bytes | None = None) -> str:
        return digest(prompt.encode("utf-8") + (image or b""))

    def add(self, prompt: str, image: bytes | None, response: "str | Sequence[str] | None") -> None:
        self.fixtures[self.key(prompt, image)] = response

    @classmethod
    def from_file(cls, path: str | Path) -> "MockLLM":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def generate(
        self, prompt: str, image: bytes | None = None, temperature: float = 0.0, sample: int = 0
    ) -> str:
        temperature = check_temperature(temperature)
        if self.responder is not None:
            out = self.responder(prompt, image, temperature, sample)
            if out is not None:
                return out
        key = self.key(prompt, image)
        if key in self.fixtures:
            value = self.fixtures[key]
            if value is None:
                raise SafetyRefusalError("mock refusal")
            if isinstance(value, str):
                return value
            variants = list(value)
            return variants[0] if temperature == 0 else variants[sample % len(variants)]
        if temperature != 0:
            key = digest(f"{key}|{temperature!r}|{sample}".encode())
        return f"mock-response-{key[:6]}"
