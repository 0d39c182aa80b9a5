"""Timed screenshot bursts over WebDriver.

Navigates, waits for document-ready plus a settle delay, dismisses known
pop-ups once (so dismissal itself never creates inter-frame differences),
pre-filters blocked pages by keyword, then captures N full-page frames
spaced by a fixed interval.
"""

from __future__ import annotations

import io
import logging
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .errors import ContractViolation, XbiscanError
from .webdriver import (
    ELEMENT_KEY,
    CommandError,
    NavigationTimeout,
    SessionError,
    UnsupportedCommand,
    WebDriverSession,
)

logger = logging.getLogger(__name__)

# First two phrases observed verbatim on real blocked pages; the last two are
# conservative extensions. Order matters: the first hit names the verdict.
DEFAULT_BLOCKED_KEYWORDS = (
    "403 forbidden",
    "you have been blocked",
    "access denied",
    "verify you are human",
)

DEFAULT_FRAME_COUNT = 5
DEFAULT_INTERVAL = 1.0
DEFAULT_SETTLE_DELAY = 2.0
DEFAULT_WINDOW_HEIGHT = 1080
_EXCERPT_LIMIT = 500

# Scripts are module constants so a protocol-level test double can recognize
# them without parsing JavaScript.
READY_STATE_SCRIPT = "return document.readyState;"
PAGE_TEXT_SCRIPT = "return document.body ? (document.body.innerText || document.body.textContent || '') : '';"
SCROLL_HEIGHT_SCRIPT = "return Math.max(document.documentElement ? document.documentElement.scrollHeight : 0, document.body ? document.body.scrollHeight : 0);"
REMOVE_ELEMENT_SCRIPT = "arguments[0].remove();"
TEXT_POPUP_SCRIPT = """
var needle = arguments[0].toLowerCase();
var action = arguments[1];
var nodes = document.querySelectorAll('button, a, [role="button"], input[type="button"], input[type="submit"], div, span');
for (var i = 0; i < nodes.length; i++) {
  var el = nodes[i];
  var text = (el.innerText || el.textContent || '').trim().toLowerCase();
  if (text && text.indexOf(needle) !== -1) {
    if (action === 'click') { el.click(); } else { el.remove(); }
    return el.tagName.toLowerCase();
  }
}
return null;
"""


class CaptureError(XbiscanError):
    """A burst could not be completed."""


class CaptureConfigurationError(CaptureError):
    """The browser configuration prevents capturing; the message says how to fix it."""


@dataclass(frozen=True)
class BrowserConfig:
    name: str
    webdriver_endpoint: str
    version_label: str | None = None
    headless: bool = True
    viewport_width: int = 1920
    page_load_timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.viewport_width <= 0:
            raise ContractViolation("viewport_width must be > 0")
        if self.page_load_timeout <= 0:
            raise ContractViolation("page_load_timeout must be > 0")

    @property
    def slug(self) -> str:
        """Filesystem-safe identifier: name plus version label when present."""
        parts = [self.name]
        if self.version_label:
            parts.append(self.version_label)
        return re.sub(r"[^a-zA-Z0-9_.-]+", "_", "_".join(parts)).lower()

    @property
    def label(self) -> str:
        return f"{self.name} {self.version_label}".strip() if self.version_label else self.name


@dataclass(frozen=True)
class BlockedVerdict:
    matched_keyword: str
    page_excerpt: str


@dataclass(frozen=True)
class PopupRule:
    """One dismissal rule: a CSS selector (starting with #, . or [) or a
    visible-text keyword, plus the action to take on the first match."""

    match: str
    action: str = "click"

    def __post_init__(self) -> None:
        if not self.match:
            raise ContractViolation("popup rule needs a match criterion")
        if self.action not in ("click", "remove"):
            raise ContractViolation(f"popup action must be click or remove, got {self.action!r}")

    @property
    def is_selector(self) -> bool:
        return self.match[0] in "#.["


@dataclass(frozen=True)
class PopupFilter:
    rules: tuple[PopupRule, ...] = ()


@dataclass
class ScreenshotSet:
    """An ordered burst of full-page captures of one URL in one browser."""

    url: str
    browser: BrowserConfig
    frames: list[np.ndarray]
    capture_times: list[float]
    popup_dismissals: list[str] = field(default_factory=list)
    blocked: BlockedVerdict | None = None

    def __post_init__(self) -> None:
        if len(self.frames) != len(self.capture_times) or not self.frames:
            raise ContractViolation("frames and capture_times must be equal-length and non-empty")
        for earlier, later in zip(self.capture_times, self.capture_times[1:]):
            if later <= earlier:
                raise ContractViolation("capture_times must be strictly increasing")
        widths = {f.shape[1] for f in self.frames}
        if len(widths) != 1:
            raise ContractViolation(f"all frames must share one width, got {sorted(widths)}")


def detect_blocked_page(page_text: str, keywords: Sequence[str] = DEFAULT_BLOCKED_KEYWORDS) -> BlockedVerdict | None:
    """Case-insensitive substring scan; first keyword in configured order wins.

    Returns a verdict carrying a short excerpt around the match, or None
    when no keyword appears.
    """
    lowered = page_text.lower()
    for keyword in keywords:
        pos = lowered.find(keyword.lower())
        if pos < 0:
            continue
        margin = max(0, (_EXCERPT_LIMIT - len(keyword)) // 2)
        start = max(0, pos - margin)
        excerpt = page_text[start : start + _EXCERPT_LIMIT]
        return BlockedVerdict(matched_keyword=keyword, page_excerpt=excerpt)
    return None


def dismiss_popups(session: WebDriverSession, popups: PopupFilter) -> list[str]:
    """Apply each matching rule at most once, in rule order.

    Returns a description per fired rule; a rule whose action fails is
    skipped with a warning entry, never an abort.
    """
    dismissals: list[str] = []
    for rule in popups.rules:
        try:
            fired = _apply_rule(session, rule)
        except (CommandError, SessionError) as exc:
            logger.warning("popup rule %r failed: %s", rule.match, exc)
            dismissals.append(f"warning: rule {rule.match!r} failed: {exc}")
            continue
        if fired:
            dismissals.append(fired)
    return dismissals


def _apply_rule(session: WebDriverSession, rule: PopupRule) -> str | None:
    if rule.is_selector:
        element_id = session.find_element(rule.match)
        if element_id is None:
            return None
        if rule.action == "click":
            session.click(element_id)
            return f"clicked: {rule.match}"
        session.execute_script(REMOVE_ELEMENT_SCRIPT, [{ELEMENT_KEY: element_id}])
        return f"removed: {rule.match}"
    tag = session.execute_script(TEXT_POPUP_SCRIPT, [rule.match, rule.action])
    if tag is None:
        return None
    verb = "clicked" if rule.action == "click" else "removed"
    return f"{verb} text: {rule.match!r} ({tag})"


def capture_burst(
    url: str,
    cfg: BrowserConfig,
    n: int = DEFAULT_FRAME_COUNT,
    interval: float = DEFAULT_INTERVAL,
    popups: PopupFilter | None = None,
    *,
    blocked_keywords: Sequence[str] = DEFAULT_BLOCKED_KEYWORDS,
    settle_delay: float = DEFAULT_SETTLE_DELAY,
    clock: Callable[[], float] = time.monotonic,
    sleep: Callable[[float], None] = time.sleep,
) -> ScreenshotSet:
    """Capture an n-frame full-page burst of a URL, spaced by `interval`.

    Pop-up dismissal runs once before the burst. If the page text matches a
    blocked keyword, a single verification frame is captured and the set is
    returned with its verdict populated.
    """
    if n < 1:
        raise ContractViolation("n must be >= 1")
    if interval < 0:
        raise ContractViolation("interval must be >= 0")
    with WebDriverSession.create(cfg.webdriver_endpoint, _capabilities(cfg)) as session:
        session.set_timeouts(cfg.page_load_timeout)
        session.set_window_rect(width=cfg.viewport_width, height=DEFAULT_WINDOW_HEIGHT)
        session.navigate(url)
        _wait_document_ready(session, cfg.page_load_timeout, url, clock, sleep)
        if settle_delay > 0:
            sleep(settle_delay)

        dismissals = dismiss_popups(session, popups) if popups and popups.rules else []

        page_text = session.execute_script(PAGE_TEXT_SCRIPT) or ""
        verdict = detect_blocked_page(page_text, blocked_keywords)

        frames: list[np.ndarray] = []
        times: list[float] = []
        for index in range(1 if verdict else n):
            if index:
                sleep(interval)
            stamp = clock()
            if times and stamp <= times[-1]:  # guard against coarse clocks
                stamp = times[-1] + 1e-6
            times.append(stamp)
            frames.append(_full_page_frame(session, cfg))
        return ScreenshotSet(
            url=url,
            browser=cfg,
            frames=frames,
            capture_times=times,
            popup_dismissals=dismissals,
            blocked=verdict,
        )


def _capabilities(cfg: BrowserConfig) -> dict:
    return {"browserName": cfg.name, "xbiscan:headless": cfg.headless}


def _wait_document_ready(
    session: WebDriverSession,
    timeout: float,
    url: str,
    clock: Callable[[], float],
    sleep: Callable[[float], None],
) -> None:
    deadline = clock() + timeout
    while True:
        if session.execute_script(READY_STATE_SCRIPT) == "complete":
            return
        if clock() >= deadline:
            raise NavigationTimeout(url, f"document not ready after {timeout}s: {url}")
        sleep(0.1)


def _full_page_frame(session: WebDriverSession, cfg: BrowserConfig) -> np.ndarray:
    """Full-page capture: vendor command when supported, else grow the window
    to the document scroll height and take a viewport shot."""
    try:
        png = session.full_page_screenshot()
    except UnsupportedCommand:
        height = int(session.execute_script(SCROLL_HEIGHT_SCRIPT) or DEFAULT_WINDOW_HEIGHT)
        session.set_window_rect(height=max(height, 1))
        png = _viewport_screenshot(session, cfg)
    except CommandError as exc:
        raise _screenshot_error(exc, cfg) from exc
    return _decode_png(png)


def _viewport_screenshot(session: WebDriverSession, cfg: BrowserConfig) -> bytes:
    try:
        return session.screenshot()
    except CommandError as exc:
        raise _screenshot_error(exc, cfg) from exc


def _screenshot_error(exc: CommandError, cfg: BrowserConfig) -> CaptureError:
    if not cfg.headless:
        return CaptureConfigurationError(
            f"screenshot command failed for {cfg.name} ({exc}); this browser may only "
            "support full-page screenshots in headless mode — set headless = true"
        )
    return CaptureError(f"screenshot command failed for {cfg.name}: {exc}")


def _decode_png(png: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(png)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)
