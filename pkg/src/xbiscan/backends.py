"""Vision-language-model backends.

A backend takes (prompt text, ordered list of RGB images) and returns a
completion string. The HTTP backend talks to any endpoint accepting the
wire contract POST {model, prompt, images: [base64 PNG, ...]} -> {completion};
the mock backend replays canned completions keyed by image content hash so
the whole pipeline runs deterministically offline.

A shared token bucket enforces a requests-per-minute budget across workers,
and transient failures are retried with exponential backoff.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import requests
from PIL import Image

from .composite import content_hash
from .errors import XbiscanError

logger = logging.getLogger(__name__)

# Phrases shared between the default prompt templates and the mock backend's
# stage inference. The renderer inserts the exclusion headers into the third
# stage's prompt exactly when the corresponding earlier stage ran.
AD_EXCLUSION_HEADER = "Advertisement regions already identified (do not report these):"
DYNAMIC_EXCLUSION_HEADER = "Dynamic elements already identified (do not report these):"
STAGE_MARKERS: tuple[tuple[str, str], ...] = (
    ("blocked_check", "post-inference screening"),
    ("xbi", "blocked-unsupported"),
    ("ads", "advertisement"),
    ("dynamic", "dynamic"),
)
STAGES = ("ads", "dynamic", "xbi", "blocked_check")


class VlmError(XbiscanError):
    """Base class for backend failures."""


class VlmTransportError(VlmError):
    """Network-level failure; safe to retry."""


class VlmRateLimitError(VlmTransportError):
    """The backend asked us to slow down; safe to retry after backoff."""


class VlmParseError(VlmError):
    """A completion (or response payload) could not be interpreted."""

    def __init__(self, message: str, raw_response: str = "") -> None:
        super().__init__(message)
        self.raw_response = raw_response


class VlmStageError(VlmError):
    """A stage failed hard (retries exhausted or non-retryable refusal)."""


class VlmBackend:
    """Request contract: complete(prompt, images) -> completion text."""

    identity: str = "vlm"
    #: True when identical (prompt, images) always yield identical completions,
    #: in which case re-asking after a parse failure is pointless.
    deterministic: bool = False

    def complete(self, prompt: str, images: Sequence[np.ndarray]) -> str:
        raise NotImplementedError


class RateLimiter:
    """Sliding-window token bucket: at most `per_minute` acquisitions in any
    60-second window. Thread-safe; blocks until a slot frees up."""

    def __init__(
        self,
        per_minute: int,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if per_minute < 1:
            raise ValueError("per_minute must be >= 1")
        self.per_minute = per_minute
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._stamps: deque[float] = deque()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and self._stamps[0] <= now - 60.0:
                    self._stamps.popleft()
                if len(self._stamps) < self.per_minute:
                    self._stamps.append(now)
                    return
                wait = self._stamps[0] + 60.0 - now
            self._sleep(max(wait, 0.001))


@dataclass(frozen=True)
class RetryPolicy:
    """Up to len(backoffs) retries after the initial call, transport and
    rate-limit errors only; parse errors are never retried."""

    backoffs: tuple[float, ...] = (1.0, 4.0, 16.0)


def call_backend(
    backend: VlmBackend,
    prompt: str,
    images: Sequence[np.ndarray],
    *,
    limiter: RateLimiter | None = None,
    retry: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """One rate-limited, retried backend call."""
    last_error: VlmTransportError | None = None
    for attempt in range(len(retry.backoffs) + 1):
        if attempt:
            sleep(retry.backoffs[attempt - 1])
        if limiter is not None:
            limiter.acquire()
        try:
            return backend.complete(prompt, images)
        except VlmTransportError as exc:
            last_error = exc
            logger.warning("backend %s attempt %d failed: %s", backend.identity, attempt + 1, exc)
    raise VlmStageError(
        f"backend {backend.identity} failed after {len(retry.backoffs) + 1} attempts: {last_error}"
    ) from last_error


# --- mock backend ------------------------------------------------------------


@dataclass
class MockCall:
    stage: str
    prompt: str
    image_hashes: tuple[str, ...]
    completion: str
    timestamp: float


class MockVlmBackend(VlmBackend):
    """Deterministic backend replaying a canned-completion mapping.

    The mapping file format:

        {
          "defaults": {"ads": "...", "dynamic": "...", "xbi": "...", "blocked_check": "..."},
          "hashes": {"<content sha256>": "<site id>", ...},
          "sites": {"<site id>": {"ads": "...", "xbi": "..." | {"default": "...",
                                   "no_ad_exclusions": "..."}, ...}}
        }

    The stage is inferred from marker phrases carried by the default prompt
    templates; the site is resolved from the first attached image's content
    hash. Unknown hashes fall back to the per-stage default completion. An
    "xbi" entry may be an object whose "no_ad_exclusions" completion is used
    when the prompt lacks the advertisement-exclusion section, which lets
    fixtures emulate the extra false positives an unassisted third stage
    produces.
    """

    deterministic = True

    def __init__(
        self,
        mapping: dict,
        identity: str = "mock",
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        self.identity = identity
        self._defaults: dict = mapping.get("defaults", {})
        self._hashes: dict = mapping.get("hashes", {})
        self._sites: dict = mapping.get("sites", {})
        self._clock = clock
        self.calls: list[MockCall] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, identity: str = "mock") -> "MockVlmBackend":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")), identity=identity)

    def complete(self, prompt: str, images: Sequence[np.ndarray]) -> str:
        stage = infer_stage(prompt)
        hashes = tuple(content_hash(img) for img in images)
        site = next((self._hashes[h] for h in hashes if h in self._hashes), None)
        entry = self._sites.get(site, {}).get(stage) if site else None
        if entry is None:
            entry = self._defaults.get(stage, "")
        if isinstance(entry, dict):
            if stage == "xbi" and AD_EXCLUSION_HEADER not in prompt and "no_ad_exclusions" in entry:
                completion = entry["no_ad_exclusions"]
            else:
                completion = entry.get("default", "")
        else:
            completion = entry
        with self._lock:
            self.calls.append(
                MockCall(
                    stage=stage,
                    prompt=prompt,
                    image_hashes=hashes,
                    completion=completion,
                    timestamp=self._clock(),
                )
            )
        return completion

    def calls_for_stage(self, stage: str) -> list[MockCall]:
        with self._lock:
            return [c for c in self.calls if c.stage == stage]


def infer_stage(prompt: str) -> str:
    """Classify a prompt into one of the four stages via marker phrases."""
    lowered = prompt.lower()
    for stage, marker in STAGE_MARKERS:
        if marker.lower() in lowered:
            return stage
    return "unknown"


# --- HTTP backend --------------------------------------------------------------


class HttpVlmBackend(VlmBackend):
    """Client for the JSON-over-HTTPS wire contract.

    The API key travels only in the Authorization header; it is never
    written to disk or included in reports.
    """

    deterministic = False

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 120.0,
    ) -> None:
        self.endpoint = endpoint
        self.model = model
        self.identity = model
        self._api_key = api_key
        self._timeout = timeout
        self._http = requests.Session()

    def complete(self, prompt: str, images: Sequence[np.ndarray]) -> str:
        body = {
            "model": self.model,
            "prompt": prompt,
            "images": [_encode_png_b64(img) for img in images],
        }
        headers = {"Authorization": f"Bearer {self._api_key}"} if self._api_key else {}
        try:
            resp = self._http.post(self.endpoint, json=body, headers=headers, timeout=self._timeout)
        except requests.RequestException as exc:
            raise VlmTransportError(f"request to {self.endpoint} failed: {exc}") from exc
        if resp.status_code == 429:
            raise VlmRateLimitError(f"{self.endpoint} rate-limited the request")
        if resp.status_code >= 500:
            raise VlmTransportError(f"{self.endpoint} returned HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise VlmStageError(f"{self.endpoint} rejected the request: HTTP {resp.status_code}")
        try:
            payload = resp.json()
            completion = payload["completion"]
        except (ValueError, KeyError, TypeError) as exc:
            raise VlmParseError(f"response from {self.endpoint} lacks completion text") from exc
        if not isinstance(completion, str):
            raise VlmParseError(f"completion from {self.endpoint} is not text")
        return completion

    def close(self) -> None:
        self._http.close()


def _encode_png_b64(img: np.ndarray) -> str:
    buffer = io.BytesIO()
    Image.fromarray(img, mode="RGB").save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("ascii")
