"""Content-addressed on-disk response cache and the counting/caching wrappers.

Layout: ``{root}/{key[:2]}/{key}.bin`` holds the raw response bytes and
``{key}.meta`` holds JSON ``{identity, operation, created_at, sha256, size}``.
The ``.bin`` file is the commit point: it is published with an exclusive
hard link, so concurrent writers persist a key at most once and losers adopt
the winner's bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from ..errors import StoreCorruptError
from .base import CallCounters, EncoderBackend, LLMBackend, check_temperature

logger = logging.getLogger(__name__)

_META_WAIT = 2.0


def request_key(identity: str, operation: str, request: dict[str, Any]) -> str:
    canonical = json.dumps([identity, operation, request], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CacheEntry:
    key: str
    value: bytes
    identity: str
    operation: str
    created_at: float


class CacheStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _paths(self, key: str) -> tuple[Path, Path]:
        d = self.root / key[:2]
        return d / f"{key}.bin", d / f"{key}.meta"

    def get(self, key: str) -> CacheEntry | None:
        """Return the entry for ``key`` or ``None`` on a miss.

        Raises:
            StoreCorruptError: stored bytes do not match the recorded digest.
        """
        bin_path, meta_path = self._paths(key)
        if not bin_path.exists():
            return None
        deadline = time.monotonic() + _META_WAIT
        while not meta_path.exists():
            # A writer has linked .bin but not yet published .meta.
            if time.monotonic() > deadline:
                raise StoreCorruptError(f"{key}: value without metadata")
            time.sleep(0.005)
        try:
            value = bin_path.read_bytes()
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise StoreCorruptError(f"{key}: unreadable entry ({exc})") from exc
        if hashlib.sha256(value).hexdigest() != meta.get("sha256"):
            raise StoreCorruptError(f"{key}: digest mismatch")
        return CacheEntry(key, value, meta["identity"], meta["operation"], meta["created_at"])

    def put(self, key: str, value: bytes, identity: str, operation: str) -> bytes:
        """Persist ``value`` unless another writer got there first.

        Returns the bytes that ended up stored (the winner's on a lost race).
        """
        bin_path, meta_path = self._paths(key)
        bin_path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "identity": identity,
            "operation": operation,
            "created_at": time.time(),
            "sha256": hashlib.sha256(value).hexdigest(),
            "size": len(value),
        }
        tmp_bin = self._write_temp(bin_path.parent, value)
        try:
            os.link(tmp_bin, bin_path)
        except FileExistsError:
            os.unlink(tmp_bin)
            entry = self.get(key)
            return entry.value if entry is not None else value
        os.unlink(tmp_bin)
        tmp_meta = self._write_temp(bin_path.parent, json.dumps(meta, sort_keys=True).encode("utf-8"))
        os.replace(tmp_meta, meta_path)
        return value

    @staticmethod
    def _write_temp(directory: Path, data: bytes) -> str:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        return tmp

    def discard(self, key: str) -> None:
        for path in self._paths(key):
            try:
                path.unlink()
            except FileNotFoundError:
                pass

    def keys(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("??/*.bin"))

    def verify(self) -> list[str]:
        """Re-digest every entry; return the keys that are corrupt."""
        bad = []
        for key in self.keys():
            try:
                self.get(key)
            except StoreCorruptError:
                bad.append(key)
        return bad

    def stats(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = defaultdict(lambda: {"entries": 0, "bytes": 0})
        for key in self.keys():
            bin_path, meta_path = self._paths(key)
            try:
                identity = json.loads(meta_path.read_text(encoding="utf-8"))["identity"]
            except (OSError, ValueError, KeyError):
                identity = "<unreadable>"
            out[identity]["entries"] += 1
            out[identity]["bytes"] += bin_path.stat().st_size
        return dict(sorted(out.items()))

    def clear(self) -> int:
        n = 0
        for key in self.keys():
            self.discard(key)
            n += 1
        return n


class _CachingBase:
    def __init__(self, delegate, store: CacheStore | None, counters: CallCounters | None):
        self.delegate = delegate
        self.store = store
        self.counters = counters if counters is not None else CallCounters()
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()

    @property
    def identity(self) -> str:
        return self.delegate.identity

    def _lock_for(self, key: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks[key]

    def _fetch(
        self,
        operation: str,
        request: dict[str, Any],
        counter: str,
        call: Callable[[], bytes],
    ) -> bytes:
        if self.store is None:
            self.counters.bump(counter)
            return call()
        key = request_key(self.identity, operation, request)
        with self._lock_for(key):
            try:
                entry = self.store.get(key)
            except StoreCorruptError as exc:
                logger.warning("discarding corrupt cache entry: %s", exc)
                self.store.discard(key)
                entry = None
            if entry is not None:
                self.counters.bump("cache_hits")
                return entry.value
            self.counters.bump(counter)
            value = call()
            return self.store.put(key, value, self.identity, operation)


def _vec_bytes(v: np.ndarray) -> bytes:
    return np.asarray(v, dtype="<f8").tobytes()


def _bytes_vec(b: bytes) -> np.ndarray:
    if len(b) == 0 or len(b) % 8:
        raise StoreCorruptError("vector payload has a bad length")
    return np.frombuffer(b, dtype="<f8").astype(np.float64)


class CachedEncoder(_CachingBase):
    """Encoder wrapper that counts delegate calls and optionally caches them."""

    @property
    def dim(self) -> int | None:
        return self.delegate.dim

    @property
    def max_text_chars(self) -> int | None:
        return self.delegate.max_text_chars

    def encode_text(self, text: str) -> np.ndarray:
        raw = self._fetch(
            "encode_text", {"text": text}, "encode_text_calls",
            lambda: _vec_bytes(self.delegate.encode_text(text)),
        )
        return _bytes_vec(raw)

    def encode_image(self, image: bytes) -> np.ndarray:
        raw = self._fetch(
            "encode_image", {"image_sha256": hashlib.sha256(image).hexdigest()}, "encode_image_calls",
            lambda: _vec_bytes(self.delegate.encode_image(image)),
        )
        return _bytes_vec(raw)


class CachedLLM(_CachingBase):
    """LLM wrapper that counts delegate calls and optionally caches them."""

    def generate(
        self, prompt: str, image: bytes | None = None, temperature: float = 0.0, sample: int = 0
    ) -> str:
        temperature = check_temperature(temperature)
        request = {
            "prompt": prompt,
            "image_sha256": None if image is None else hashlib.sha256(image).hexdigest(),
            "temperature": repr(float(temperature)),
            "sample": sample,
        }
        raw = self._fetch(
            "generate", request, "generate_calls",
            lambda: self.delegate.generate(prompt, image, temperature, sample).encode("utf-8"),
        )
        return raw.decode("utf-8")


def cached(backend, store: CacheStore | str | Path | None, counters: CallCounters | None = None):
    """Wrap an encoder or LLM with call counting and (if ``store`` is given) caching."""
    if store is not None and not isinstance(store, CacheStore):
        store = CacheStore(store)
    if isinstance(backend, EncoderBackend):
        return CachedEncoder(backend, store, counters)
    if isinstance(backend, LLMBackend):
        return CachedLLM(backend, store, counters)
    raise TypeError(f"not a backend: {backend!r}")
