"""Clients for the two external services: text completion and text-to-image.

Both HTTP clients perform a single round trip per call and signal retryable
trouble (connection errors, timeouts, 429 and 5xx) with
:class:`~weathergen.errors.TransportError`; retry policy lives with the caller.
"""
from __future__ import annotations

import base64
import binascii
import hashlib
import io
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import requests
from PIL import Image

from .errors import EmptyCompletion, ProtocolError, TransportError, ValidationError

RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})


@dataclass(frozen=True)
class DescriptorRequest:
    instruction: str
    user_text: str
    temperature: float = 0.7
    max_tokens: int = 160

    def __post_init__(self):
        if not self.instruction.strip() or not self.user_text.strip():
            raise ValidationError("instruction and user_text must be non-empty")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValidationError("max_tokens must be positive")


class TextBackend(Protocol):
    def complete(self, req: DescriptorRequest) -> str: ...


def _bearer(token_env: str | None) -> dict[str, str]:
    if token_env:
        token = os.environ.get(token_env)
        if token:
            return {"Authorization": f"Bearer {token}"}
    return {}


def _post(url: str, body: dict, headers: dict, timeout: float) -> requests.Response:
    try:
        resp = requests.post(url, json=body, headers=headers, timeout=timeout)
    except (requests.ConnectionError, requests.Timeout) as exc:
        raise TransportError(f"{url}: {exc.__class__.__name__}: {exc}") from exc
    if resp.status_code in RETRYABLE_STATUS:
        raise TransportError(f"{url}: HTTP {resp.status_code}")
    if resp.status_code >= 400:
        raise ProtocolError(f"{url}: HTTP {resp.status_code}: {resp.text[:500]}")
    return resp


@dataclass
class ChatCompletionBackend:
    """OpenAI-compatible ``/chat/completions`` endpoint.

    The bearer token is read from the environment variable named by
    ``token_env`` at call time; it is never stored in config.
    """

    url: str
    model: str = "llama"
    token_env: str | None = "WEATHERGEN_TEXT_TOKEN"
    timeout: float = 60.0

    def complete(self, req: DescriptorRequest) -> str:
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.instruction},
                {"role": "user", "content": req.user_text},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        resp = _post(self.url, body, _bearer(self.token_env), self.timeout)
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"{self.url}: unexpected completion payload: {exc!r}") from exc
        if not isinstance(content, str) or not content.strip():
            raise EmptyCompletion(f"{self.url}: empty completion")
        return content


@dataclass(frozen=True)
class ImageRequest:
    prompt: str
    seed: int
    negative_prompt: str = ""
    width: int = 512
    height: int = 512
    steps: int = 30
    guidance: float = 7.5

    def __post_init__(self):
        if not self.prompt.strip():
            raise ValidationError("prompt must be non-empty")
        if self.width <= 0 or self.height <= 0 or self.width % 8 or self.height % 8:
            raise ValidationError(f"width/height must be positive multiples of 8, got {self.width}x{self.height}")
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if not self.guidance > 0:
            raise ValidationError("guidance must be positive")
        if not (0 <= self.seed < 2**64):
            raise ValidationError("seed must be an unsigned 64-bit integer")

    def to_body(self) -> dict:
        return {
            "prompt": self.prompt,
            "negative_prompt": self.negative_prompt,
            "width": self.width,
            "height": self.height,
            "steps": self.steps,
            "guidance": self.guidance,
            "seed": self.seed,
        }


class ImageBackend(Protocol):
    backend_id: str

    def generate(self, req: ImageRequest) -> bytes: ...


def decode_image_payload(resp: requests.Response) -> bytes:
    """Extract image bytes from raw, base64-text or JSON (``images``/``image``) bodies."""
    ctype = resp.headers.get("Content-Type", "").split(";")[0].strip().lower()
    if ctype.startswith("image/") or ctype == "application/octet-stream":
        if not resp.content:
            raise ProtocolError("empty image body")
        return resp.content
    if ctype == "application/json":
        try:
            doc = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"invalid JSON body: {exc}") from exc
        if isinstance(doc, dict) and isinstance(doc.get("images"), list) and doc["images"]:
            text = doc["images"][0]
        elif isinstance(doc, dict) and isinstance(doc.get("image"), str):
            text = doc["image"]
        else:
            raise ProtocolError("JSON body has no 'images' list or 'image' field")
    else:
        text = resp.text
    if not isinstance(text, str) or not text.strip():
        raise ProtocolError("empty image payload")
    if text.startswith("data:"):
        text = text.partition(",")[2]
    try:
        return base64.b64decode(text.strip(), validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ProtocolError(f"image payload is not valid base64: {exc}") from exc


@dataclass
class HttpImageBackend:
    """txt2img HTTP endpoint taking the :class:`ImageRequest` fields as a JSON body."""

    url: str
    backend_id: str = "http"
    token_env: str | None = "WEATHERGEN_IMAGE_TOKEN"
    timeout: float = 300.0

    def generate(self, req: ImageRequest) -> bytes:
        headers = {"Accept": "image/png, application/json;q=0.9, text/plain;q=0.5"}
        headers.update(_bearer(self.token_env))
        resp = _post(self.url, req.to_body(), headers, self.timeout)
        return decode_image_payload(resp)


def mock_pixels(prompt: str, seed: int, width: int, height: int) -> np.ndarray:
    """Deterministic RGB pixels for the mock backend.

    The ``height x width x 3`` uint8 array is the first ``3*w*h`` bytes of
    SHAKE-256 over ``sha256(prompt) || seed (8 bytes LE) || width (4 LE) ||
    height (4 LE)``, laid out row-major.
    """
    key = (
        hashlib.sha256(prompt.encode("utf-8")).digest()
        + int(seed).to_bytes(8, "little")
        + int(width).to_bytes(4, "little")
        + int(height).to_bytes(4, "little")
    )
    raw = hashlib.shake_256(key).digest(width * height * 3)
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)


def encode_png(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG", compress_level=1)
    return buf.getvalue()


@dataclass
class MockImageBackend:
    """In-process stand-in for a diffusion server.

    ``fail_first`` maps a request seed to how many initial calls with that seed
    raise :class:`TransportError` (``-1`` fails forever). ``max_in_flight``
    records the peak number of concurrent calls.
    """

    backend_id: str = "mock"
    delay: float = 0.0
    fail_first: dict[int, int] = field(default_factory=dict)
    calls: int = 0
    in_flight: int = 0
    max_in_flight: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _seen: dict[int, int] = field(default_factory=dict, repr=False)

    def generate(self, req: ImageRequest) -> bytes:
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            n = self._seen.get(req.seed, 0)
            self._seen[req.seed] = n + 1
        try:
            if self.delay:
                time.sleep(self.delay)
            budget = self.fail_first.get(req.seed, 0)
            if budget < 0 or n < budget:
                raise TransportError(f"mock: scripted failure {n + 1} for seed {req.seed}")
            return encode_png(mock_pixels(req.prompt, req.seed, req.width, req.height))
        finally:
            with self._lock:
                self.in_flight -= 1
