"""JSON-over-HTTP clients for a remote encoder service and a remote LLM.

Wire protocol (UTF-8 JSON, all POST):

* ``{endpoint}/encode_text``  ``{"text": ...}``        -> ``{"embedding": [...], "dim": n}``
* ``{endpoint}/encode_image`` ``{"image_b64": ...}``   -> ``{"embedding": [...], "dim": n}``
* ``{endpoint}/generate``     ``{"prompt", "image_b64"?, "temperature"}`` -> ``{"text": ...}``

Service-reported failures may carry ``{"error": msg, "code": c}``; code
``"safety"`` maps to :class:`SafetyRefusalError` and ``"too_long"`` (or HTTP
413) to :class:`TooLongError`.
"""

from __future__ import annotations

import base64
import logging
import random
import time
from typing import Any, Callable

import httpx
import numpy as np

from ..errors import (
    ProtocolError,
    RemoteError,
    SafetyRefusalError,
    TooLongError,
    TransportError,
)
from .base import check_embedding, check_temperature, prepare_text

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = "1"
MAX_ATTEMPTS = 5
BACKOFF_BASE = 0.25

RETRY_STATUSES = {408, 429, 500, 502, 503, 504}


class _RetryableRemote(Exception):
    def __init__(self, error: RemoteError):
        self.error = error


class HttpClient:
    """Shared POST-with-retries plumbing."""

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_attempts: int = MAX_ATTEMPTS,
        backoff_base: float = BACKOFF_BASE,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _delay(self, attempt: int) -> float:
        return self.backoff_base * (2**attempt) * random.uniform(0.5, 1.5)

    def post(self, path: str, body: dict[str, Any]) -> dict[str, Any]:
        url = f"{self.endpoint}/{path}"
        last: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                self._sleep(self._delay(attempt - 1))
            try:
                response = self._client.post(url, json=body)
            except httpx.TransportError as exc:
                logger.warning("POST %s failed (attempt %d): %s", url, attempt + 1, exc)
                last = TransportError(f"{url}: {exc}")
                continue
            try:
                return self._parse(response)
            except _RetryableRemote as exc:
                logger.warning("POST %s -> %d (attempt %d)", url, response.status_code, attempt + 1)
                last = exc.error
        assert last is not None
        raise last

    @staticmethod
    def _parse(response: httpx.Response) -> dict[str, Any]:
        status = response.status_code
        try:
            payload = response.json()
        except ValueError:
            payload = None
        if status >= 400 or (isinstance(payload, dict) and "error" in payload):
            message, code = f"HTTP {status}", None
            if isinstance(payload, dict):
                message = str(payload.get("error") or message)
                code = payload.get("code")
            if code == "safety":
                raise SafetyRefusalError(message, status)
            if code == "too_long" or status == 413:
                raise TooLongError(message, status)
            error = RemoteError(message, status)
            if status in RETRY_STATUSES:
                raise _RetryableRemote(error)
            raise error
        if not isinstance(payload, dict):
            raise ProtocolError(f"expected a JSON object, got {response.text[:200]!r}")
        return payload


class HttpEncoder:
    def __init__(
        self,
        endpoint: str,
        model: str = "default",
        dim: int | None = None,
        max_text_chars: int | None = None,
        client: HttpClient | None = None,
        **client_kwargs,
    ):
        self.client = client or HttpClient(endpoint, **client_kwargs)
        self._dim = dim
        self._max_text_chars = max_text_chars
        self.identity = f"http-encoder:{model}@{self.client.endpoint}#p{PROTOCOL_VERSION}"

    @property
    def dim(self) -> int | None:
        return self._dim

    @property
    def max_text_chars(self) -> int | None:
        return self._max_text_chars

    def _embedding(self, payload: dict[str, Any]) -> np.ndarray:
        if "embedding" not in payload or "dim" not in payload:
            raise ProtocolError("encoder response lacks 'embedding' or 'dim'")
        dim = payload["dim"]
        if not isinstance(dim, int) or dim < 1:
            raise ProtocolError(f"bad dim {dim!r}")
        if self._dim is not None and dim != self._dim:
            raise ProtocolError(f"service reported dim {dim}, expected {self._dim}")
        vec = check_embedding(payload["embedding"], dim)
        self._dim = dim
        return vec

    def encode_text(self, text: str) -> np.ndarray:
        text = prepare_text(text, self._max_text_chars)
        return self._embedding(self.client.post("encode_text", {"text": text}))

    def encode_image(self, image: bytes) -> np.ndarray:
        b64 = base64.b64encode(image).decode("ascii")
        return self._embedding(self.client.post("encode_image", {"image_b64": b64}))


class HttpLLM:
    def __init__(self, endpoint: str, model: str = "default", client: HttpClient | None = None, **client_kwargs):
        self.client = client or HttpClient(endpoint, **client_kwargs)
        self.identity = f"http-llm:{model}@{self.client.endpoint}#p{PROTOCOL_VERSION}"

    def generate(
        self, prompt: str, image: bytes | None = None, temperature: float = 0.0, sample: int = 0
    ) -> str:
        body: dict[str, Any] = {"prompt": prompt, "temperature": check_temperature(temperature)}
        if image is not None:
            body["image_b64"] = base64.b64encode(image).decode("ascii")
        payload = self.client.post("generate", body)
        text = payload.get("text")
        if not isinstance(text, str):
            raise ProtocolError("LLM response lacks a 'text' string")
        if not text.strip():
            raise ProtocolError("LLM returned empty text")
        return text
