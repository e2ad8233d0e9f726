"""Chat-completions client for an OpenAI-compatible vision endpoint."""

from __future__ import annotations

import base64
import json
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import httpx

log = logging.getLogger(__name__)

ENV_URL = "TTRL_ENDPOINT_URL"
ENV_KEY = "TTRL_API_KEY"
ENV_MODEL = "TTRL_MODEL_NAME"

PROMPT_TEMPLATE = (
    "{question}\n\n"
    "Think step by step about the video frames, then give your final answer "
    "on the last line in the form 'Answer: X'."
)
# Rough budget: ~4 characters per text token, fixed cost per image.
CHARS_PER_TOKEN = 4
TOKENS_PER_IMAGE = 256

_MIME = {".jpg": "image/jpeg", ".jpeg": "image/jpeg", ".png": "image/png"}


class BackendError(RuntimeError):
    """The backend could not produce a completion."""


class ConfigurationError(ValueError):
    """Required endpoint settings are missing or invalid."""


class PromptTooLongError(BackendError):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    api_key: str
    model: str
    timeout: float = 120.0
    attempts: int = 3
    base_delay: float = 1.0

    @classmethod
    def from_env(cls, environ=None, **overrides) -> "EndpointConfig":
        env = os.environ if environ is None else environ
        missing = [k for k in (ENV_URL, ENV_KEY, ENV_MODEL) if not env.get(k, "").strip()]
        if missing:
            raise ConfigurationError(f"missing endpoint environment variable(s): {', '.join(missing)}")
        return cls(env[ENV_URL].strip(), env[ENV_KEY].strip(), env[ENV_MODEL].strip(), **overrides)

    @property
    def completions_url(self) -> str:
        url = self.url.rstrip("/")
        return url if url.endswith("/chat/completions") else url + "/chat/completions"


@dataclass(frozen=True)
class Completion:
    text: str
    latency_ms: float
    attempts: int

    def __str__(self):
        return self.text


def encode_image(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"frame image not found: {p}")
    data = p.read_bytes()
    if not data:
        raise ValueError(f"frame image is empty (0 bytes): {p}")
    mime = _MIME.get(p.suffix.lower(), "application/octet-stream")
    return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"


def estimate_prompt_tokens(text: str, n_images: int) -> int:
    return math.ceil(len(text) / CHARS_PER_TOKEN) + TOKENS_PER_IMAGE * n_images


def build_request(question: str, images: Sequence, temperature: float, max_tokens: int,
                  model: str) -> dict:
    content = [{"type": "text", "text": PROMPT_TEMPLATE.format(question=question)}]
    for img in images:
        content.append({"type": "image_url", "image_url": {"url": encode_image(img)}})
    return {
        "model": model,
        "messages": [{"role": "user", "content": content}],
        "temperature": temperature,
        "max_tokens": max_tokens,
    }


def _retryable(status: int) -> bool:
    return status == 429 or status >= 500


def remote_generate(question: str, images: Sequence, temperature: float, max_tokens: int,
                    endpoint: EndpointConfig, max_prompt_tokens: int = 7524,
                    client: httpx.Client | None = None, sleep=time.sleep) -> Completion:
    """Send one chat completion carrying the question and base64 frames.

    Transport errors, 429 and 5xx are retried with exponential backoff
    (``base_delay``, doubling each retry) up to ``endpoint.attempts`` tries in total.
    """
    prompt = PROMPT_TEMPLATE.format(question=question)
    est = estimate_prompt_tokens(prompt, len(images))
    if est > max_prompt_tokens:
        raise PromptTooLongError(
            f"prompt needs ~{est} tokens ({len(images)} images), limit is {max_prompt_tokens}")
    payload = build_request(question, images, temperature, max_tokens, endpoint.model)
    headers = {"Authorization": f"Bearer {endpoint.api_key}", "Content-Type": "application/json"}

    own = client is None
    client = client or httpx.Client(timeout=endpoint.timeout)
    start = time.perf_counter()
    last = None
    try:
        for attempt in range(endpoint.attempts):
            if attempt:
                sleep(endpoint.base_delay * 2 ** (attempt - 1))
            try:
                resp = client.post(endpoint.completions_url, json=payload, headers=headers)
            except httpx.TransportError as exc:
                last = f"transport error: {exc!r}"
                log.warning("attempt %d/%d to %s failed: %s", attempt + 1, endpoint.attempts,
                            endpoint.completions_url, last)
                continue
            if resp.status_code == 200:
                try:
                    text = resp.json()["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    raise BackendError(
                        f"{endpoint.completions_url}: malformed completion body ({exc!r})") from None
                latency = (time.perf_counter() - start) * 1000.0
                return Completion(text or "", latency, attempt + 1)
            last = f"HTTP {resp.status_code}: {resp.text[:200]}"
            if not _retryable(resp.status_code):
                raise BackendError(f"{endpoint.completions_url} (model {endpoint.model}): {last}")
            log.warning("attempt %d/%d to %s failed: %s", attempt + 1, endpoint.attempts,
                        endpoint.completions_url, last)
    finally:
        if own:
            client.close()
    raise BackendError(
        f"{endpoint.completions_url} (model {endpoint.model}): gave up after "
        f"{endpoint.attempts} attempts; last error {last}")


def _default_frame_name(d: Path, i: int) -> str:
    for ext in (".jpg", ".png"):
        if (d / f"frame_{i:04d}{ext}").is_file():
            return f"frame_{i:04d}{ext}"
    return f"frame_{i:04d}.jpg"


def load_frame_dir(directory) -> list[Path]:
    """Frame files of a directory listed by its ``manifest.json``."""
    d = Path(directory)
    manifest = d / "manifest.json"
    if not manifest.is_file():
        raise FileNotFoundError(f"{d}: missing manifest.json")
    doc = json.loads(manifest.read_text(encoding="utf-8"))
    T = int(doc["num_frames"])
    names = doc.get("frames") or [_default_frame_name(d, i) for i in range(T)]
    if len(names) != T:
        raise ValueError(f"{manifest}: num_frames={T} but {len(names)} frames listed")
    paths = [d / n for n in names]
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"{manifest}: listed frame {p.name} does not exist")
    return paths
