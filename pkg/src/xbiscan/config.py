"""Run configuration: one TOML document drives the whole pipeline.

Secrets never live in the file; the API key is read from the environment
variable named by `detector.api_key_env`. The configuration digest hashes
the canonicalized document, so it changes iff any field changes.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib

from .capture import (
    DEFAULT_BLOCKED_KEYWORDS,
    DEFAULT_FRAME_COUNT,
    DEFAULT_INTERVAL,
    DEFAULT_SETTLE_DELAY,
    BrowserConfig,
    PopupFilter,
    PopupRule,
)
from .detector import DEFAULT_PIXEL_BUDGET
from .errors import ContractViolation


@dataclass(frozen=True)
class CaptureSettings:
    frames: int = DEFAULT_FRAME_COUNT
    interval: float = DEFAULT_INTERVAL
    settle_delay: float = DEFAULT_SETTLE_DELAY

    def __post_init__(self) -> None:
        if self.frames < 1:
            raise ContractViolation("capture.frames must be >= 1")
        if self.interval < 0:
            raise ContractViolation("capture.interval must be >= 0")


@dataclass(frozen=True)
class DetectorConfig:
    backend: str = "mock"  # mock | http
    endpoint: str = ""
    model: str = "vlm"
    api_key_env: str = "XBISCAN_API_KEY"
    rate_limit_per_minute: int = 60
    pixel_budget: int = DEFAULT_PIXEL_BUDGET
    stage3_input: str = "overlay"
    ads_enabled: bool = True
    dynamics_enabled: bool = True
    prompt_dir: str = ""
    mock_map: str = ""

    def __post_init__(self) -> None:
        if self.backend not in ("mock", "http"):
            raise ContractViolation(f"detector.backend must be mock or http, got {self.backend!r}")
        if self.stage3_input not in ("overlay", "first_frame"):
            raise ContractViolation("detector.stage3_input must be overlay or first_frame")
        if self.rate_limit_per_minute < 1:
            raise ContractViolation("detector.rate_limit_per_minute must be >= 1")

    def api_key(self) -> str | None:
        return os.environ.get(self.api_key_env) or None


@dataclass(frozen=True)
class RunConfig:
    browsers: tuple[BrowserConfig, BrowserConfig]
    capture: CaptureSettings = CaptureSettings()
    detector: DetectorConfig = DetectorConfig()
    blocked_keywords: tuple[str, ...] = DEFAULT_BLOCKED_KEYWORDS
    popup_filter: PopupFilter = PopupFilter()
    output_root: str = "runs"
    workers: int = 4

    def __post_init__(self) -> None:
        if len(self.browsers) != 2:
            raise ContractViolation("exactly two browser configurations are required")
        if self.workers < 1:
            raise ContractViolation("workers must be >= 1")

    def is_regression_pair(self) -> bool:
        """Two versions of one browser (regression mode)."""
        return self.browsers[0].name.lower() == self.browsers[1].name.lower()


def default_config() -> RunConfig:
    return RunConfig(
        browsers=(
            BrowserConfig(name="firefox", webdriver_endpoint="http://127.0.0.1:4444"),
            BrowserConfig(name="chrome", webdriver_endpoint="http://127.0.0.1:9515"),
        )
    )


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ContractViolation(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ContractViolation(f"config file {path} is not valid TOML: {exc}") from exc
    return config_from_dict(data)


def config_from_dict(data: dict) -> RunConfig:
    browsers_raw = data.get("browsers", [])
    if len(browsers_raw) != 2:
        raise ContractViolation("config must define exactly two [[browsers]] tables")
    browsers = tuple(_browser(entry) for entry in browsers_raw)

    cap = data.get("capture", {})
    capture = CaptureSettings(
        frames=int(cap.get("frames", DEFAULT_FRAME_COUNT)),
        interval=float(cap.get("interval", DEFAULT_INTERVAL)),
        settle_delay=float(cap.get("settle_delay", DEFAULT_SETTLE_DELAY)),
    )

    det = data.get("detector", {})
    detector = DetectorConfig(
        backend=det.get("backend", "mock"),
        endpoint=det.get("endpoint", ""),
        model=det.get("model", "vlm"),
        api_key_env=det.get("api_key_env", "XBISCAN_API_KEY"),
        rate_limit_per_minute=int(det.get("rate_limit_per_minute", 60)),
        pixel_budget=int(det.get("pixel_budget", DEFAULT_PIXEL_BUDGET)),
        stage3_input=det.get("stage3_input", "overlay"),
        ads_enabled=bool(det.get("ads_enabled", True)),
        dynamics_enabled=bool(det.get("dynamics_enabled", True)),
        prompt_dir=det.get("prompt_dir", ""),
        mock_map=det.get("mock_map", ""),
    )

    blocked = tuple(data.get("blocked", {}).get("keywords", DEFAULT_BLOCKED_KEYWORDS))
    rules = tuple(
        PopupRule(match=rule["match"], action=rule.get("action", "click"))
        for rule in data.get("popups", {}).get("rules", [])
    )
    run = data.get("run", {})
    return RunConfig(
        browsers=browsers,  # type: ignore[arg-type]
        capture=capture,
        detector=detector,
        blocked_keywords=blocked,
        popup_filter=PopupFilter(rules=rules),
        output_root=run.get("output_root", "runs"),
        workers=int(run.get("workers", 4)),
    )


def _browser(entry: dict) -> BrowserConfig:
    try:
        return BrowserConfig(
            name=entry["name"],
            webdriver_endpoint=entry["webdriver_endpoint"],
            version_label=entry.get("version_label") or None,
            headless=bool(entry.get("headless", True)),
            viewport_width=int(entry.get("viewport_width", 1920)),
            page_load_timeout=float(entry.get("page_load_timeout", 30.0)),
        )
    except KeyError as exc:
        raise ContractViolation(f"browser config missing {exc}") from exc


def config_to_canonical_dict(cfg: RunConfig) -> dict:
    return {
        "browsers": [
            {
                "name": b.name,
                "version_label": b.version_label,
                "webdriver_endpoint": b.webdriver_endpoint,
                "headless": b.headless,
                "viewport_width": b.viewport_width,
                "page_load_timeout": b.page_load_timeout,
            }
            for b in cfg.browsers
        ],
        "capture": {
            "frames": cfg.capture.frames,
            "interval": cfg.capture.interval,
            "settle_delay": cfg.capture.settle_delay,
        },
        "detector": {
            "backend": cfg.detector.backend,
            "endpoint": cfg.detector.endpoint,
            "model": cfg.detector.model,
            "api_key_env": cfg.detector.api_key_env,
            "rate_limit_per_minute": cfg.detector.rate_limit_per_minute,
            "pixel_budget": cfg.detector.pixel_budget,
            "stage3_input": cfg.detector.stage3_input,
            "ads_enabled": cfg.detector.ads_enabled,
            "dynamics_enabled": cfg.detector.dynamics_enabled,
            "prompt_dir": cfg.detector.prompt_dir,
            "mock_map": cfg.detector.mock_map,
        },
        "blocked_keywords": list(cfg.blocked_keywords),
        "popup_rules": [{"match": r.match, "action": r.action} for r in cfg.popup_filter.rules],
        "output_root": cfg.output_root,
        "workers": cfg.workers,
    }


def config_digest(cfg: RunConfig) -> str:
    canonical = json.dumps(config_to_canonical_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
