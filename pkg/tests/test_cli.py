"""End-to-end command tests: every subcommand through main(argv)."""

from __future__ import annotations

import json
from pathlib import Path

import pytest
import requests

from conftest import FakeTrackerServer
from fake_webdriver import FakeWebDriverServer
from xbiscan import storage
from xbiscan.cli import EXIT_OK, EXIT_SITE_FAILURES, EXIT_USAGE, main
from xbiscan.fixtures import MOCK_DEFAULTS
from xbiscan.ingest import load_reports_jsonl
from xbiscan.report import load_report


def write_config(
    path: Path,
    endpoint: str,
    out_root: Path,
    *,
    mock_map: str = "",
    regression: bool = False,
) -> Path:
    if regression:
        browsers = f"""
[[browsers]]
name = "fox"
version_label = "versionA"
webdriver_endpoint = "{endpoint}"
viewport_width = 640
page_load_timeout = 5.0

[[browsers]]
name = "fox"
version_label = "versionB"
webdriver_endpoint = "{endpoint}"
viewport_width = 640
page_load_timeout = 5.0
"""
    else:
        browsers = f"""
[[browsers]]
name = "fox"
webdriver_endpoint = "{endpoint}"
viewport_width = 640
page_load_timeout = 5.0

[[browsers]]
name = "crow"
webdriver_endpoint = "{endpoint}"
viewport_width = 640
page_load_timeout = 5.0
"""
    path.write_text(
        f"""
[run]
output_root = "{out_root.as_posix()}"
workers = 2
{browsers}
[capture]
frames = 3
interval = 0.01
settle_delay = 0.0

[detector]
backend = "mock"
mock_map = "{mock_map}"
""",
        encoding="utf-8",
    )
    return path


def write_urls(path: Path, sites: list[str]) -> Path:
    lines = [f"{site} http://fixture.test/{site}/a http://fixture.test/{site}/b" for site in sites]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def defaults_only_mapping(path: Path) -> Path:
    path.write_text(json.dumps({"defaults": dict(MOCK_DEFAULTS)}), encoding="utf-8")
    return path


class TestIngestCommand:
    def test_fixture_tracker_to_jsonl(self, tmp_path):
        pages = [
            [
                {"id": "1", "url": "https://x.test/a", "browser": "firefox", "version": 120, "summary": "s"},
                {"id": "2", "url": "https://x.test/b", "browser": "firefox", "version": 99, "summary": "s"},
                {"id": "3", "browser": "firefox", "version": 120, "summary": "no url"},
            ]
        ]
        out = tmp_path / "kept.jsonl"
        rejected_out = tmp_path / "rejected.jsonl"
        with FakeTrackerServer(pages) as server:
            code = main(
                [
                    "ingest",
                    "--endpoint", server.base_url,
                    "--source", "bugzilla",
                    "--out", str(out),
                    "--rejected-out", str(rejected_out),
                    "--min-version", "100",
                ]
            )
        assert code == EXIT_OK
        kept = load_reports_jsonl(out)
        assert [r.bug_id for r in kept] == ["1"]
        rejected = [json.loads(line) for line in rejected_out.read_text().splitlines()]
        assert {r["bug_id"]: r["reason"] for r in rejected} == {"2": "browser version 99 older than 100", "3": "no URL"}

    def test_empty_source_writes_empty_file_exit_zero(self, tmp_path):
        out = tmp_path / "kept.jsonl"
        with FakeTrackerServer([[]]) as server:
            code = main(["ingest", "--endpoint", server.base_url, "--out", str(out)])
        assert code == EXIT_OK
        assert out.read_text() == ""

    def test_tracker_error_exits_nonzero(self, tmp_path):
        with FakeTrackerServer([[]], status=403) as server:
            code = main(["ingest", "--endpoint", server.base_url, "--out", str(tmp_path / "x.jsonl")])
        assert code == EXIT_SITE_FAILURES


class TestCaptureCommand:
    def test_three_sites_two_browsers_six_sets(self, corpus, tmp_path):
        out_root = tmp_path / "runs"
        urls = write_urls(tmp_path / "urls.txt", ["st01", "ls01", "ad01"])
        with FakeWebDriverServer(corpus) as server:
            config = write_config(tmp_path / "cfg.toml", server.endpoint, out_root)
            code = main(["capture", "--config", str(config), "--urls", str(urls), "--run-id", "r1"])
        assert code == EXIT_OK
        tree = out_root / "r1"
        for site in ("st01", "ls01", "ad01"):
            for slug in ("fox", "crow"):
                assert (tree / site / slug / "capture.json").is_file()
                assert (tree / site / slug / "0.png").is_file()
        meta = storage.load_run_meta(tree)
        assert meta.browser_slugs == ["fox", "crow"]

    def test_blocked_fixture_records_verdict_in_sidecar(self, corpus, tmp_path):
        out_root = tmp_path / "runs"
        urls = write_urls(tmp_path / "urls.txt", ["blk01"])
        with FakeWebDriverServer(corpus) as server:
            config = write_config(tmp_path / "cfg.toml", server.endpoint, out_root)
            code = main(["capture", "--config", str(config), "--urls", str(urls), "--run-id", "r1"])
        assert code == EXIT_OK
        sidecar = json.loads((out_root / "r1" / "blk01" / "fox" / "capture.json").read_text())
        assert sidecar["blocked"]["matched_keyword"] == "403 forbidden"
        assert sidecar["frame_count"] == 1

    def test_unreachable_webdriver_endpoint_exits_2(self, tmp_path):
        out_root = tmp_path / "runs"
        urls = write_urls(tmp_path / "urls.txt", ["st01"])
        config = write_config(tmp_path / "cfg.toml", "http://127.0.0.1:1", out_root)
        code = main(["capture", "--config", str(config), "--urls", str(urls)])
        assert code == EXIT_USAGE

    def test_from_renders_import_path(self, corpus, tmp_path):
        out_root = tmp_path / "runs"
        code = main(
            [
                "capture",
                "--from-renders", str(corpus),
                "--out", str(out_root),
                "--run-id", "imported",
            ]
        )
        assert code == EXIT_OK
        tree = out_root / "imported"
        assert storage.load_run_meta(tree).source == "renders"
        assert len(storage.list_sites(tree)) == 12


@pytest.fixture()
def cli_tree(corpus, tmp_path):
    """Capture a seven-site tree (covering all four impact labels plus a
    blocked page) through the CLI against the fake WebDriver, then key a
    mock mapping to it."""
    out_root = tmp_path / "runs"
    urls = write_urls(tmp_path / "urls.txt", ["st01", "ls01", "ad01", "pb01", "fc01", "ub01", "blk01"])
    with FakeWebDriverServer(corpus) as server:
        config = write_config(tmp_path / "cfg.toml", server.endpoint, out_root)
        assert main(["capture", "--config", str(config), "--urls", str(urls), "--run-id", "r1"]) == EXIT_OK
    tree = out_root / "r1"
    mapping = tmp_path / "mapping.json"
    assert (
        main(
            [
                "fixtures", "mockmap",
                "--tree", str(tree),
                "--manifest", str(corpus / "manifest.json"),
                "--out", str(mapping),
            ]
        )
        == EXIT_OK
    )
    config = write_config(tmp_path / "cfg.toml", "http://unused.test", out_root, mock_map=mapping.as_posix())
    return tree, config, mapping


class TestAnalyzeCommand:
    def test_deterministic_reports_and_blocked_skip(self, cli_tree):
        tree, config, _ = cli_tree
        assert main(["analyze", "--config", str(config), "--tree", str(tree)]) == EXIT_OK
        first = (tree / "report.json").read_bytes()
        assert main(["analyze", "--config", str(config), "--tree", str(tree)]) == EXIT_OK
        assert (tree / "report.json").read_bytes() == first
        report = load_report(tree / "report.json")
        assert [s for s in report.skipped if s.site_id == "blk01"][0].reason == "blocked_precapture"
        assert (tree / "report.html").is_file()
        by_id = {s.site_id: s for s in report.sites}
        assert by_id["ls01"].xbi.impact.label == "significant-visual"
        assert by_id["pb01"].xbi.findings == ()  # popup finding isolated
        assert report.popup_table[0][0] == "pb01"

    def test_no_ads_flag_recorded_in_stage_flags(self, cli_tree):
        tree, config, _ = cli_tree
        assert main(["analyze", "--config", str(config), "--tree", str(tree), "--no-ads"]) == EXIT_OK
        report = load_report(tree / "report.json")
        assert all(not s.stage_flags.ads_enabled for s in report.sites)
        assert all(s.ads is None for s in report.sites)

    def test_missing_tree_exits_2(self, tmp_path):
        config = write_config(tmp_path / "cfg.toml", "http://unused.test", tmp_path)
        code = main(["analyze", "--config", str(config), "--tree", str(tmp_path / "nowhere")])
        assert code == EXIT_USAGE

    def test_mock_backend_without_mapping_exits_2(self, cli_tree, tmp_path):
        tree, _, _ = cli_tree
        config = write_config(tmp_path / "bare.toml", "http://unused.test", tmp_path)
        assert main(["analyze", "--config", str(config), "--tree", str(tree)]) == EXIT_USAGE


class TestEvaluateCommand:
    def test_closed_loop_metrics_all_one(self, cli_tree, corpus, tmp_path):
        tree, config, _ = cli_tree
        assert main(["analyze", "--config", str(config), "--tree", str(tree)]) == EXIT_OK
        out = tmp_path / "eval.json"
        code = main(
            [
                "evaluate",
                "--report", str(tree / "report.json"),
                "--truth", str(corpus / "truth.csv"),
                "--out", str(out),
            ]
        )
        assert code == EXIT_OK
        data = json.loads(out.read_text())
        assert data["accuracy"] == 1.0
        assert data["macro_precision"] == 1.0
        assert data["macro_recall"] == 1.0
        assert data["unscored"] == []

    def test_sites_missing_from_truth_are_unscored(self, cli_tree, corpus, tmp_path):
        tree, config, _ = cli_tree
        assert main(["analyze", "--config", str(config), "--tree", str(tree)]) == EXIT_OK
        truth = tmp_path / "partial.csv"
        lines = (corpus / "truth.csv").read_text().splitlines()
        kept = [lines[0]] + [line for line in lines[1:] if not line.startswith(("st01,", "ad01,"))]
        truth.write_text("\n".join(kept) + "\n", encoding="utf-8")
        out = tmp_path / "eval.json"
        assert main(["evaluate", "--report", str(tree / "report.json"), "--truth", str(truth), "--out", str(out)]) == EXIT_OK
        data = json.loads(out.read_text())
        assert sorted(data["unscored"]) == ["ad01", "st01"]

    def test_empty_intersection_exits_2(self, cli_tree, tmp_path):
        tree, config, _ = cli_tree
        assert main(["analyze", "--config", str(config), "--tree", str(tree)]) == EXIT_OK
        truth = tmp_path / "other.csv"
        truth.write_text(
            "site_id,impact,ads_present,dynamics_present\nzz,no-XBI,no,no\n", encoding="utf-8"
        )
        code = main(["evaluate", "--report", str(tree / "report.json"), "--truth", str(truth)])
        assert code == EXIT_USAGE


class TestRegressCommand:
    def test_same_endpoint_twice_static_sites_all_no_xbi(self, corpus, tmp_path):
        out_root = tmp_path / "runs"
        mapping = defaults_only_mapping(tmp_path / "defaults.json")
        # same URL for both "versions": identical renderer, no differences
        urls = tmp_path / "urls.txt"
        urls.write_text(
            "\n".join(f"{s} http://fixture.test/{s}/a" for s in ("st01", "ad01", "vp01")) + "\n",
            encoding="utf-8",
        )
        with FakeWebDriverServer(corpus) as server:
            config = write_config(
                tmp_path / "cfg.toml", server.endpoint, out_root,
                mock_map=mapping.as_posix(), regression=True,
            )
            code = main(["regress", "--config", str(config), "--urls", str(urls), "--run-id", "rg"])
        assert code == EXIT_OK
        report = load_report(out_root / "rg" / "report.json")
        assert all(s.xbi.impact.label == "no-XBI" for s in report.sites)
        assert len(report.sites) == 3
        labels = [b["label"] for b in report.browsers]
        assert labels == ["fox versionA", "fox versionB"]
        html = (out_root / "rg" / "report.html").read_text()
        assert "versionA" in html and "versionB" in html

    def test_differing_variants_yield_findings_after_remap(self, corpus, tmp_path):
        out_root = tmp_path / "runs"
        mapping = defaults_only_mapping(tmp_path / "defaults.json")
        urls = write_urls(tmp_path / "urls.txt", ["ls01"])  # version A sees /a, version B sees /b
        with FakeWebDriverServer(corpus) as server:
            config = write_config(
                tmp_path / "cfg.toml", server.endpoint, out_root,
                mock_map=mapping.as_posix(), regression=True,
            )
            assert main(["regress", "--config", str(config), "--urls", str(urls), "--run-id", "rg"]) == EXIT_OK
        tree = out_root / "rg"
        # key the mock to the captured tree, then re-analyze without recapturing
        keyed = tmp_path / "keyed.json"
        assert main(
            ["fixtures", "mockmap", "--tree", str(tree), "--manifest", str(corpus / "manifest.json"), "--out", str(keyed)]
        ) == EXIT_OK
        config = write_config(
            tmp_path / "cfg.toml", "http://unused.test", out_root, mock_map=keyed.as_posix(), regression=True
        )
        assert main(["analyze", "--config", str(config), "--tree", str(tree)]) == EXIT_OK
        report = load_report(tree / "report.json")
        assert report.sites[0].xbi.impact.label == "significant-visual"
        assert len(report.sites[0].xbi.findings) > 0

    def test_distinct_browser_names_rejected(self, corpus, tmp_path):
        urls = write_urls(tmp_path / "urls.txt", ["st01"])
        mapping = defaults_only_mapping(tmp_path / "defaults.json")
        config = write_config(
            tmp_path / "cfg.toml", "http://unused.test", tmp_path, mock_map=mapping.as_posix()
        )
        code = main(["regress", "--config", str(config), "--urls", str(urls)])
        assert code == EXIT_USAGE


class TestFixturesCommand:
    def test_gen_serve_get(self, tmp_path):
        out = tmp_path / "corpus"
        assert main(["fixtures", "gen", "--out", str(out), "--seed", "9"]) == EXIT_OK
        assert (out / "truth.csv").is_file()
        from xbiscan.fixtures import FixtureServer

        with FixtureServer(out) as server:
            assert requests.get(f"{server.base_url}/st01/a", timeout=5).status_code == 200

    def test_seed_repetition_identical_tree(self, tmp_path):
        from test_fixtures import tree_digest

        assert main(["fixtures", "gen", "--out", str(tmp_path / "c1"), "--seed", "4"]) == EXIT_OK
        assert main(["fixtures", "gen", "--out", str(tmp_path / "c2"), "--seed", "4"]) == EXIT_OK
        assert tree_digest(tmp_path / "c1") == tree_digest(tmp_path / "c2")

    def test_bad_manifest_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(
            json.dumps({"seed": 1, "specs": [{"site_id": "x", "injection": "warp"}]}), encoding="utf-8"
        )
        code = main(["fixtures", "gen", "--out", str(tmp_path / "c"), "--manifest", str(bad)])
        assert code == EXIT_USAGE
