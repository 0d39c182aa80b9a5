"""Minimal W3C WebDriver wire client.

Covers the handful of commands the capture pipeline needs: session
lifecycle, navigation, synchronous script execution, window sizing, element
find/click, and screenshots (viewport plus vendor full-page where the server
supports it). Talks plain HTTP+JSON against any endpoint speaking the W3C
dialect, so tests can run against a local stand-in server.
"""

from __future__ import annotations

import base64
import logging
from typing import Any

import requests

from .errors import XbiscanError

logger = logging.getLogger(__name__)

ELEMENT_KEY = "element-6066-11e4-a52e-4f735466cecf"

# Vendor full-page screenshot command paths, tried in order.
FULL_PAGE_COMMANDS = ("moz/screenshot/full",)


class WebDriverError(XbiscanError):
    """Base class for wire-protocol failures."""


class SessionError(WebDriverError):
    """Could not create or maintain a browser session."""


class NavigationTimeout(WebDriverError):
    """Navigation did not complete within the page-load timeout."""

    def __init__(self, url: str, message: str = "") -> None:
        super().__init__(message or f"navigation to {url} timed out")
        self.url = url


class CommandError(WebDriverError):
    """A command failed; carries the server's error code when known."""

    def __init__(self, message: str, error_code: str = "") -> None:
        super().__init__(message)
        self.error_code = error_code


class UnsupportedCommand(CommandError):
    """The server does not implement the requested command."""


class WebDriverSession:
    """One live browser session; never share an instance across workers."""

    def __init__(self, endpoint: str, session_id: str, http: requests.Session) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.session_id = session_id
        self._http = http
        self._full_page_command: str | None | bool = None  # None = unprobed

    @classmethod
    def create(cls, endpoint: str, capabilities: dict | None = None, timeout: float = 30.0) -> "WebDriverSession":
        http = requests.Session()
        body = {"capabilities": {"alwaysMatch": capabilities or {}}}
        try:
            resp = http.post(f"{endpoint.rstrip('/')}/session", json=body, timeout=timeout)
        except requests.RequestException as exc:
            http.close()
            raise SessionError(f"cannot reach WebDriver server at {endpoint}: {exc}") from exc
        value = _unwrap(resp)
        session_id = value.get("sessionId") if isinstance(value, dict) else None
        if not session_id:
            http.close()
            raise SessionError(f"WebDriver server at {endpoint} returned no session id")
        return cls(endpoint, session_id, http)

    def close(self) -> None:
        try:
            self._http.delete(self._url(""), timeout=10)
        except requests.RequestException:
            logger.debug("session delete failed for %s", self.session_id, exc_info=True)
        finally:
            self._http.close()

    def __enter__(self) -> "WebDriverSession":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()

    def _url(self, command: str) -> str:
        base = f"{self.endpoint}/session/{self.session_id}"
        return f"{base}/{command}" if command else base

    def _request(self, method: str, command: str, body: dict | None = None, timeout: float = 60.0) -> Any:
        try:
            resp = self._http.request(method, self._url(command), json=body, timeout=timeout)
        except requests.RequestException as exc:
            raise CommandError(f"{command or 'session'} failed: {exc}") from exc
        return _unwrap(resp)

    def set_timeouts(self, page_load_seconds: float) -> None:
        self._request("POST", "timeouts", {"pageLoad": int(page_load_seconds * 1000)})

    def set_window_rect(self, width: int | None = None, height: int | None = None) -> None:
        body: dict[str, int] = {}
        if width is not None:
            body["width"] = width
        if height is not None:
            body["height"] = height
        self._request("POST", "window/rect", body)

    def navigate(self, url: str) -> None:
        try:
            self._request("POST", "url", {"url": url}, timeout=300.0)
        except CommandError as exc:
            if exc.error_code == "timeout":
                raise NavigationTimeout(url) from exc
            raise

    def execute_script(self, script: str, args: list | None = None) -> Any:
        return self._request("POST", "execute/sync", {"script": script, "args": args or []})

    def find_element(self, css_selector: str) -> str | None:
        """Return the element id for a CSS selector, or None when absent."""
        try:
            value = self._request("POST", "element", {"using": "css selector", "value": css_selector})
        except CommandError as exc:
            if exc.error_code == "no such element":
                return None
            raise
        return value.get(ELEMENT_KEY) if isinstance(value, dict) else None

    def click(self, element_id: str) -> None:
        self._request("POST", f"element/{element_id}/click", {})

    def screenshot(self) -> bytes:
        """Viewport screenshot as PNG bytes."""
        encoded = self._request("GET", "screenshot")
        return base64.b64decode(encoded)

    def full_page_screenshot(self) -> bytes:
        """Vendor full-page screenshot; raises UnsupportedCommand if absent.

        Support is probed once per session and cached.
        """
        if self._full_page_command is False:
            raise UnsupportedCommand("server does not support full-page screenshots")
        candidates = (
            [self._full_page_command] if isinstance(self._full_page_command, str) else FULL_PAGE_COMMANDS
        )
        for command in candidates:
            try:
                encoded = self._request("GET", command)
            except CommandError as exc:
                if exc.error_code in ("unknown command", "unknown method") or "404" in str(exc):
                    continue
                raise
            self._full_page_command = command
            return base64.b64decode(encoded)
        self._full_page_command = False
        raise UnsupportedCommand("server does not support full-page screenshots")


def _unwrap(resp: requests.Response) -> Any:
    try:
        payload = resp.json()
    except ValueError as exc:
        raise CommandError(f"non-JSON response (HTTP {resp.status_code})") from exc
    value = payload.get("value") if isinstance(payload, dict) else None
    if resp.status_code >= 400:
        error_code = ""
        message = f"HTTP {resp.status_code}"
        if isinstance(value, dict):
            error_code = value.get("error", "")
            message = f"{error_code or message}: {value.get('message', '')}"
        if resp.status_code == 404 and error_code in ("unknown command", ""):
            raise UnsupportedCommand(f"404: {message}", error_code="unknown command")
        raise CommandError(message, error_code=error_code)
    return value
