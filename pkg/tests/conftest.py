"""Shared fixtures: a generated corpus, an imported capture tree, the mock
mapping keyed to it, and a tiny paginated issue-tracker stand-in."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import pytest

from xbiscan import fixtures


@pytest.fixture(scope="session")
def corpus(tmp_path_factory) -> Path:
    """The default 12-injection corpus, generated once per test session."""
    out = tmp_path_factory.mktemp("corpus")
    return fixtures.generate_corpus(fixtures.default_manifest(), out / "tree")


@pytest.fixture(scope="session")
def manifest() -> fixtures.CorpusManifest:
    return fixtures.default_manifest()


@pytest.fixture(scope="session")
def imported_tree(corpus, tmp_path_factory) -> Path:
    """Capture tree built via the frame-import path (no browser)."""
    out = tmp_path_factory.mktemp("runs")
    return fixtures.import_renders(corpus, out, "imported", created_at="2026-01-01T00:00:00+00:00")


@pytest.fixture(scope="session")
def mock_mapping(imported_tree, manifest) -> dict:
    return fixtures.build_mock_mapping(imported_tree, manifest)


@pytest.fixture(scope="session")
def mock_mapping_file(mock_mapping, tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("mock") / "mapping.json"
    fixtures.write_mock_mapping(mock_mapping, path)
    return path


class FakeTrackerServer:
    """Serves JSON issue pages at /?q=...&page=N; empty array terminates.

    `pages` is a list of lists of issue dicts. Set `status` to force an HTTP
    error, or `garbage=True` to return non-JSON.
    """

    def __init__(self, pages: list[list[dict]], status: int = 200, garbage: bool = False) -> None:
        self.pages = pages
        self.status = status
        self.garbage = garbage
        self.requests: list[str] = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self) -> None:  # noqa: N802
                outer.requests.append(self.path)
                if outer.garbage:
                    body = b"this is not json"
                else:
                    page = int(parse_qs(urlparse(self.path).query).get("page", ["1"])[0])
                    data = outer.pages[page - 1] if page <= len(outer.pages) else []
                    body = json.dumps(data).encode("utf-8")
                self.send_response(outer.status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args: object) -> None:
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/issues"

    def __enter__(self) -> "FakeTrackerServer":
        self._thread.start()
        return self

    def __exit__(self, *exc: object) -> None:
        self._server.shutdown()
        self._server.server_close()
