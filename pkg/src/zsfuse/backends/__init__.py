"""Encoder and LLM backends: HTTP clients, offline mocks, and the response cache."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .base import CallCounters, EncoderBackend, LLMBackend, check_embedding, prepare_text
from .cache import CachedEncoder, CachedLLM, CacheStore, cached, request_key
from .http import HttpClient, HttpEncoder, HttpLLM
from .mock import MockEncoder, MockLLM

ENV_ENCODER_URL = "ZSFUSE_ENCODER_URL"
ENV_LLM_URL = "ZSFUSE_LLM_URL"
ENV_CACHE_DIR = "ZSFUSE_CACHE_DIR"
ENV_API_KEY = "ZSFUSE_API_KEY"


@dataclass
class Backends:
    """The encoder pair and LLM used by one run, sharing one set of counters."""

    encoder: CachedEncoder
    llm: CachedLLM
    counters: CallCounters = field(default_factory=CallCounters)

    @classmethod
    def create(
        cls,
        encoder: EncoderBackend,
        llm: LLMBackend,
        cache_dir: str | Path | None = None,
    ) -> "Backends":
        counters = CallCounters()
        store = CacheStore(cache_dir) if cache_dir is not None else None
        return cls(CachedEncoder(encoder, store, counters), CachedLLM(llm, store, counters), counters)

    @classmethod
    def from_env(cls, cache_dir: str | Path | None = None, **kwargs) -> "Backends":
        """HTTP backends configured from ``ZSFUSE_*`` environment variables."""
        enc_url = os.environ.get(ENV_ENCODER_URL)
        llm_url = os.environ.get(ENV_LLM_URL)
        if not enc_url or not llm_url:
            raise ValueError(f"{ENV_ENCODER_URL} and {ENV_LLM_URL} must be set")
        api_key = os.environ.get(ENV_API_KEY)
        cache_dir = cache_dir or os.environ.get(ENV_CACHE_DIR)
        return cls.create(
            HttpEncoder(enc_url, api_key=api_key, **kwargs), HttpLLM(llm_url, api_key=api_key), cache_dir
        )

    @property
    def identity(self) -> str:
        return f"{self.encoder.identity}|{self.llm.identity}"


__all__ = [
    "Backends",
    "CachedEncoder",
    "CachedLLM",
    "CacheStore",
    "CallCounters",
    "EncoderBackend",
    "HttpClient",
    "HttpEncoder",
    "HttpLLM",
    "LLMBackend",
    "MockEncoder",
    "MockLLM",
    "cached",
    "check_embedding",
    "prepare_text",
    "request_key",
]
