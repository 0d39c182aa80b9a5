"""A W3C WebDriver wire-protocol stand-in backed by fixture renders.

"Navigating" to /{site}/{variant} loads that variant's pre-rendered frames
and page text from a generated corpus; screenshots serve successive frames
(clamped at the last), so a static site yields identical frames and the
carousel site yields changing ones. Pop-up elements come from the render
metadata: finding/clicking them switches to the dismissed frame set, exactly
like closing a real banner.

Failure injection knobs cover the error paths: missing full-page support,
screenshot refusal, unclickable elements, and pages that never become ready.
"""

from __future__ import annotations

import base64
import io
import json
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import urlparse

from PIL import Image

from xbiscan import capture
from xbiscan.webdriver import ELEMENT_KEY


@dataclass
class _Session:
    site: str = ""
    variant: str = ""
    meta: dict = field(default_factory=dict)
    render_dir: Path | None = None
    frame_counter: int = 0
    dismissed: set[int] = field(default_factory=set)
    window_height: int = 600
    window_width: int = 800


class FakeWebDriverServer:
    def __init__(
        self,
        corpus: Path,
        *,
        full_page: bool = True,
        fail_screenshot: bool = False,
        fail_clicks: bool = False,
        never_ready: bool = False,
        timeout_on_navigate: bool = False,
    ) -> None:
        self.corpus = Path(corpus)
        self.full_page = full_page
        self.fail_screenshot = fail_screenshot
        self.fail_clicks = fail_clicks
        self.never_ready = never_ready
        self.timeout_on_navigate = timeout_on_navigate
        self._sessions: dict[str, _Session] = {}
        self._session_seq = 0
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self) -> None:  # noqa: N802
                outer._dispatch(self, "POST")

            def do_GET(self) -> None:  # noqa: N802
                outer._dispatch(self, "GET")

            def do_DELETE(self) -> None:  # noqa: N802
                outer._dispatch(self, "DELETE")

            def log_message(self, *args: object) -> None:
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "FakeWebDriverServer":
        self._thread.start()
        return self

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "FakeWebDriverServer":
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.shutdown()

    # -- request handling -----------------------------------------------

    def _dispatch(self, request: BaseHTTPRequestHandler, method: str) -> None:
        body: dict = {}
        length = int(request.headers.get("Content-Length") or 0)
        if length:
            body = json.loads(request.rfile.read(length))
        path = request.path.rstrip("/")

        if method == "POST" and path == "/session":
            with self._lock:
                self._session_seq += 1
                sid = f"fake-{self._session_seq}"
                self._sessions[sid] = _Session()
            _ok(request, {"sessionId": sid, "capabilities": {}})
            return

        match = re.match(r"^/session/([^/]+)(?:/(.*))?$", path)
        if not match:
            _error(request, 404, "unknown command", "no such route")
            return
        sid, command = match.group(1), match.group(2) or ""
        session = self._sessions.get(sid)
        if session is None:
            _error(request, 404, "invalid session id", sid)
            return

        if method == "DELETE" and not command:
            del self._sessions[sid]
            _ok(request, None)
        elif command == "timeouts":
            _ok(request, None)
        elif command == "window/rect":
            session.window_width = int(body.get("width", session.window_width))
            session.window_height = int(body.get("height", session.window_height))
            _ok(request, {"width": session.window_width, "height": session.window_height})
        elif command == "url" and method == "POST":
            if self.timeout_on_navigate:
                _error(request, 408, "timeout", "navigation timed out")
                return
            self._navigate(session, body["url"])
            _ok(request, None)
        elif command == "execute/sync":
            self._execute(request, session, body)
        elif command == "element" and method == "POST":
            self._find_element(request, session, body)
        elif re.fullmatch(r"element/[^/]+/click", command):
            self._click(request, session, command.split("/")[1])
        elif command == "screenshot":
            self._screenshot(request, session, full=False)
        elif command == "moz/screenshot/full":
            if not self.full_page:
                _error(request, 404, "unknown command", "full page screenshots unsupported")
            else:
                self._screenshot(request, session, full=True)
        else:
            _error(request, 404, "unknown command", command)

    def _navigate(self, session: _Session, url: str) -> None:
        parts = [p for p in urlparse(url).path.split("/") if p]
        site, variant = parts[0], parts[1]
        render_dir = self.corpus / "sites" / site / "render" / variant
        session.site = site
        session.variant = variant
        session.render_dir = render_dir
        session.meta = json.loads((render_dir / "meta.json").read_text(encoding="utf-8"))
        session.frame_counter = 0
        session.dismissed = set()

    def _execute(self, request: BaseHTTPRequestHandler, session: _Session, body: dict) -> None:
        script = body.get("script", "")
        args = body.get("args", [])
        if script == capture.READY_STATE_SCRIPT:
            _ok(request, "loading" if self.never_ready else "complete")
        elif script == capture.PAGE_TEXT_SCRIPT:
            _ok(request, self._page_text(session))
        elif script == capture.SCROLL_HEIGHT_SCRIPT:
            _ok(request, self._current_image(session).height)
        elif script == capture.REMOVE_ELEMENT_SCRIPT:
            element_id = args[0][ELEMENT_KEY]
            session.dismissed.add(int(element_id.rsplit("-", 1)[1]))
            _ok(request, None)
        elif script == capture.TEXT_POPUP_SCRIPT:
            needle = args[0].lower()
            for index, popup in enumerate(session.meta.get("popups", [])):
                if index not in session.dismissed and needle in popup["text"].lower():
                    session.dismissed.add(index)
                    _ok(request, "button")
                    return
            _ok(request, None)
        else:
            _error(request, 500, "javascript error", f"unrecognized script: {script[:60]}")

    def _find_element(self, request: BaseHTTPRequestHandler, session: _Session, body: dict) -> None:
        selector = body.get("value", "")
        for index, popup in enumerate(session.meta.get("popups", [])):
            if index not in session.dismissed and popup["selector"] == selector:
                _ok(request, {ELEMENT_KEY: f"popup-{index}"})
                return
        _error(request, 404, "no such element", selector)

    def _click(self, request: BaseHTTPRequestHandler, session: _Session, element_id: str) -> None:
        if self.fail_clicks:
            _error(request, 400, "element not interactable", element_id)
            return
        session.dismissed.add(int(element_id.rsplit("-", 1)[1]))
        _ok(request, None)

    def _page_text(self, session: _Session) -> str:
        popups = session.meta.get("popups", [])
        if popups and len(session.dismissed) >= len(popups):
            return session.meta.get("text_dismissed", session.meta["text"])
        return session.meta["text"]

    def _current_image(self, session: _Session) -> Image.Image:
        meta = session.meta
        popups = meta.get("popups", [])
        names = meta["frames"]
        if popups and len(session.dismissed) >= len(popups) and meta.get("dismissed_frames"):
            names = meta["dismissed_frames"]
        index = min(session.frame_counter, len(names) - 1)
        return Image.open(session.render_dir / names[index]).convert("RGB")

    def _screenshot(self, request: BaseHTTPRequestHandler, session: _Session, full: bool) -> None:
        if self.fail_screenshot:
            _error(request, 500, "unable to capture screen", "screenshot refused")
            return
        image = self._current_image(session)
        session.frame_counter += 1
        if not full and image.height > session.window_height:
            image = image.crop((0, 0, image.width, session.window_height))
        buffer = io.BytesIO()
        image.save(buffer, format="PNG")
        _ok(request, base64.b64encode(buffer.getvalue()).decode("ascii"))


def _ok(request: BaseHTTPRequestHandler, value: object) -> None:
    _send(request, 200, {"value": value})


def _error(request: BaseHTTPRequestHandler, status: int, code: str, message: str) -> None:
    _send(request, status, {"value": {"error": code, "message": message}})


def _send(request: BaseHTTPRequestHandler, status: int, payload: dict) -> None:
    body = json.dumps(payload).encode("utf-8")
    request.send_response(status)
    request.send_header("Content-Type", "application/json")
    request.send_header("Content-Length", str(len(body)))
    request.end_headers()
    request.wfile.write(body)
