"""Command-line interface.

Pipeline stages are separate commands with on-disk handoff (capture tree ->
report) so an expensive capture run can be re-analyzed under different
backends or stage flags without recapturing.

Exit codes: 0 success, 1 completed with site failures (or a runtime error),
2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import fixtures, storage
from .backends import HttpVlmBackend, MockVlmBackend, RateLimiter, VlmBackend
from .capture import BrowserConfig, capture_burst
from .composite import overlay, save_overlay
from .config import RunConfig, config_digest, default_config, load_config
from .detector import (
    DetectorSettings,
    PromptTemplates,
    StageFailure,
    StageFlags,
    analyze_site,
)
from .errors import ContractViolation, XbiscanError
from .evaluate import emit_eval_json, format_eval_summary, load_truth_csv, score_run
from .ingest import (
    FilterPolicy,
    TrackerEndpoint,
    fetch_reports,
    filter_reports,
    save_reports_jsonl,
)
from .report import SkipEntry, build_report, emit_json, load_report, render_html
from .webdriver import SessionError, WebDriverSession

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SITE_FAILURES = 1
EXIT_USAGE = 2


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except XbiscanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SITE_FAILURES


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xbiscan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--workers", type=int, help="parallel worker cap (overrides config)")
    common.add_argument("--run-id", help="run identifier (default: UTC timestamp)")

    p = sub.add_parser("ingest", parents=[common], help="fetch and filter bug reports")
    p.add_argument("--endpoint", required=True, help="tracker base URL")
    p.add_argument("--source", default="manual", choices=["bugzilla", "webcompat", "manual"])
    p.add_argument("--query", default="")
    p.add_argument("--out", required=True, help="output JSONL of kept reports")
    p.add_argument("--rejected-out", help="optional JSONL of rejected reports with reasons")
    p.add_argument("--no-require-url", dest="require_url", action="store_false")
    p.add_argument("--include-mobile", dest="exclude_mobile", action="store_false")
    p.add_argument("--allow-browser", action="append", default=[], help="repeatable browser allow-list")
    p.add_argument("--min-version", type=int, help="minimum browser major version")
    p.set_defaults(handler=cmd_ingest, require_url=True, exclude_mobile=True)

    p = sub.add_parser("capture", parents=[common], help="capture screenshot bursts")
    p.add_argument("--urls", help="file of lines: site_id url [url_for_browser_b]")
    p.add_argument("--from-renders", help="corpus directory; import pre-rendered frames instead of driving a browser")
    p.add_argument("--out", help="output root (overrides config run.output_root)")
    p.set_defaults(handler=cmd_capture)

    p = sub.add_parser("analyze", parents=[common], help="analyze a capture tree into a report")
    p.add_argument("--tree", required=True, help="capture tree directory ({out}/{run_id})")
    p.add_argument("--backend", choices=["mock", "http"], help="override config detector.backend")
    p.add_argument("--mock-map", help="mock completion mapping JSON")
    p.add_argument("--no-ads", dest="ads_enabled", action="store_false")
    p.add_argument("--no-dynamics", dest="dynamics_enabled", action="store_false")
    p.set_defaults(handler=cmd_analyze, ads_enabled=True, dynamics_enabled=True)

    p = sub.add_parser("evaluate", parents=[common], help="score a report against ground truth")
    p.add_argument("--report", required=True, help="report.json path")
    p.add_argument("--truth", required=True, help="ground-truth CSV")
    p.add_argument("--out", help="eval JSON output path")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("regress", parents=[common], help="capture+analyze two versions of one browser")
    p.add_argument("--urls", required=True)
    p.add_argument("--out", help="output root")
    p.add_argument("--backend", choices=["mock", "http"])
    p.add_argument("--mock-map", help="mock completion mapping JSON")
    p.set_defaults(handler=cmd_regress)

    p = sub.add_parser("fixtures", parents=[common], help="fixture corpus tools")
    fix_sub = p.add_subparsers(dest="fixtures_command", required=True)

    g = fix_sub.add_parser("gen", help="generate the corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--manifest", help="manifest JSON (default: one site per injection)")
    g.add_argument("--seed", type=int, default=7)
    g.set_defaults(handler=cmd_fixtures_gen)

    s = fix_sub.add_parser("serve", help="serve a generated corpus over HTTP")
    s.add_argument("--tree", required=True)
    s.add_argument("--bind", default="127.0.0.1:8008")
    s.set_defaults(handler=cmd_fixtures_serve)

    m = fix_sub.add_parser("mockmap", help="key the mock backend to a captured tree")
    m.add_argument("--tree", required=True)
    m.add_argument("--manifest", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(handler=cmd_fixtures_mockmap)

    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "workers", None):
        cfg = replace(cfg, workers=args.workers)
    return cfg


def _default_run_id() -> str:
    return "run-" + datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")


# --- ingest -----------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    endpoint = TrackerEndpoint(base_url=args.endpoint, source=args.source)
    reports = fetch_reports(endpoint, args.query)
    policy = FilterPolicy(
        require_url=args.require_url,
        exclude_mobile=args.exclude_mobile,
        allowed_browsers=frozenset(args.allow_browser),
        min_browser_version=args.min_version,
    )
    kept, rejected = filter_reports(reports, policy)
    save_reports_jsonl(kept, args.out)
    if args.rejected_out:
        with open(args.rejected_out, "w", encoding="utf-8") as fh:
            for report, reason in rejected:
                fh.write(
                    json.dumps({"bug_id": report.bug_id, "reason": reason}, ensure_ascii=False) + "\n"
                )
    print(f"fetched {len(reports)}, kept {len(kept)}, rejected {len(rejected)} -> {args.out}")
    return EXIT_OK


# --- capture ----------------------------------------------------------------


def _parse_urls_file(path: str) -> list[tuple[str, str, str]]:
    """Lines: `site_id url` (same URL for both browsers) or `site_id url_a url_b`."""
    entries: list[tuple[str, str, str]] = []
    seen: set[str] = set()
    for line_num, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) == 2:
            site_id, url_a, url_b = tokens[0], tokens[1], tokens[1]
        elif len(tokens) == 3:
            site_id, url_a, url_b = tokens
        else:
            raise ContractViolation(f"{path}:{line_num}: expected 'site_id url [url_b]'")
        if site_id in seen:
            raise ContractViolation(f"{path}:{line_num}: duplicate site_id {site_id!r}")
        seen.add(site_id)
        entries.append((site_id, url_a, url_b))
    return entries


def _probe_endpoints(browsers: tuple[BrowserConfig, BrowserConfig]) -> None:
    for cfg in browsers:
        try:
            WebDriverSession.create(cfg.webdriver_endpoint, {"browserName": cfg.name}, timeout=10).close()
        except SessionError as exc:
            raise ContractViolation(
                f"WebDriver endpoint for {cfg.label} is unreachable ({cfg.webdriver_endpoint}): {exc}. "
                "Start the driver (geckodriver/chromedriver) or fix webdriver_endpoint in the config."
            ) from exc


def cmd_capture(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    run_id = args.run_id or _default_run_id()
    out_root = Path(args.out or cfg.output_root)

    if args.from_renders:
        tree = fixtures.import_renders(
            args.from_renders,
            out_root,
            run_id,
            blocked_keywords=cfg.blocked_keywords,
        )
        print(f"imported renders into {tree}")
        return EXIT_OK

    if not args.urls:
        raise ContractViolation("capture needs --urls FILE (or --from-renders CORPUS)")
    return _run_capture(cfg, _parse_urls_file(args.urls), out_root / run_id, run_id)


def _run_capture(
    cfg: RunConfig,
    entries: list[tuple[str, str, str]],
    tree: Path,
    run_id: str,
) -> int:
    """Capture every (site, browser) pair in parallel up to the worker cap.

    Each task owns its own WebDriver session; a session is never shared
    across workers.
    """
    browsers = cfg.browsers
    if browsers[0].slug == browsers[1].slug:
        raise ContractViolation(
            "the two browser configs map to the same directory slug; give them distinct "
            "names or version_label values"
        )
    _probe_endpoints(browsers)

    failures: list[dict] = []

    def capture_one(site_id: str, url: str, browser: BrowserConfig) -> None:
        sset = capture_burst(
            url,
            browser,
            n=cfg.capture.frames,
            interval=cfg.capture.interval,
            popups=cfg.popup_filter,
            blocked_keywords=cfg.blocked_keywords,
            settle_delay=cfg.capture.settle_delay,
        )
        storage.save_screenshot_set(storage.browser_dir(tree, site_id, browser.slug), sset)

    tasks = [
        (site_id, url, browser)
        for site_id, url_a, url_b in entries
        for url, browser in ((url_a, browsers[0]), (url_b, browsers[1]))
    ]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        futures = {pool.submit(capture_one, *task): task for task in tasks}
        for future, (site_id, url, browser) in futures.items():
            try:
                future.result()
            except XbiscanError as exc:
                logger.error("capture failed for %s in %s: %s", site_id, browser.label, exc)
                failures.append(
                    {"site_id": site_id, "reason": "capture_failed", "detail": f"{browser.label}: {exc}"}
                )

    storage.write_run_meta(
        tree,
        storage.RunMeta(
            run_id=run_id,
            created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            browser_slugs=[b.slug for b in browsers],
            browser_labels=[b.label for b in browsers],
            failures=failures,
            source="webdriver",
        ),
    )
    print(f"captured {len(entries)} site(s) x 2 browsers into {tree}; {len(failures)} failure(s)")
    return EXIT_SITE_FAILURES if failures else EXIT_OK


# --- analyze ----------------------------------------------------------------


def _make_backend(cfg: RunConfig, args: argparse.Namespace) -> VlmBackend:
    kind = getattr(args, "backend", None) or cfg.detector.backend
    if kind == "mock":
        map_path = getattr(args, "mock_map", None) or cfg.detector.mock_map
        if not map_path:
            raise ContractViolation(
                "mock backend needs a completion mapping: pass --mock-map or set detector.mock_map"
            )
        return MockVlmBackend.from_file(map_path)
    if not cfg.detector.endpoint:
        raise ContractViolation("http backend needs detector.endpoint in the config")
    return HttpVlmBackend(
        endpoint=cfg.detector.endpoint,
        model=cfg.detector.model,
        api_key=cfg.detector.api_key(),
    )


def analyze_tree(
    tree: Path,
    cfg: RunConfig,
    backend: VlmBackend,
    flags: StageFlags,
    workers: int = 4,
) -> tuple[int, Path]:
    """Analyze every captured site under `tree`; write report.json/report.html.

    Returns (exit_code, report_path). Blocked captures are skipped with
    reason blocked_precapture; a stage failure skips just that site.
    """
    meta = storage.load_run_meta(tree)
    # the request budget meters remote backends; the deterministic mock is
    # local replay and runs unmetered
    limiter = None if backend.deterministic else RateLimiter(cfg.detector.rate_limit_per_minute)
    settings = DetectorSettings(
        templates=PromptTemplates.load(cfg.detector.prompt_dir or None),
        limiter=limiter,
        pixel_budget=cfg.detector.pixel_budget,
        stage3_input=cfg.detector.stage3_input,
    )

    skips: list[SkipEntry] = [
        SkipEntry(f["site_id"], f.get("reason", "capture_failed"), f.get("detail", ""))
        for f in meta.failures
    ]
    skipped_sites = {s.site_id for s in skips}

    to_analyze: list[tuple[str, object, object]] = []
    for site_id in storage.list_sites(tree):
        if site_id in skipped_sites:
            continue
        dirs = [storage.browser_dir(tree, site_id, slug) for slug in meta.browser_slugs]
        if not all((d / storage.CAPTURE_SIDECAR).is_file() for d in dirs):
            skips.append(SkipEntry(site_id, "capture_failed", "missing capture for one browser"))
            continue
        set_a = storage.load_screenshot_set(dirs[0])
        set_b = storage.load_screenshot_set(dirs[1])
        blocked = set_a.blocked or set_b.blocked
        if blocked:
            skips.append(SkipEntry(site_id, "blocked_precapture", blocked.matched_keyword))
            continue
        for directory, sset in zip(dirs, (set_a, set_b)):
            save_overlay(overlay(sset.frames), directory / "overlay.png", directory / "overlay.json")
        to_analyze.append((site_id, set_a, set_b))

    analyses = []

    def analyze_one(site_id: str, set_a, set_b):
        return analyze_site(site_id, (set_a, set_b), backend, flags, settings)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {
            pool.submit(analyze_one, site_id, set_a, set_b): site_id
            for site_id, set_a, set_b in to_analyze
        }
        for future, site_id in futures.items():
            try:
                analysis = future.result()
            except StageFailure as exc:
                logger.error("site %s failed: %s", site_id, exc)
                skips.append(SkipEntry(site_id, "stage_failed", exc.stage))
                continue
            storage.save_analysis(tree, analysis)
            analyses.append(analysis)

    report = build_report(
        analyses,
        skips,
        run_id=meta.run_id,
        created_at=meta.created_at,
        config_digest=config_digest(cfg),
        browsers=[
            {"slug": slug, "label": label}
            for slug, label in zip(meta.browser_slugs, meta.browser_labels)
        ],
    )
    report_path = tree / "report.json"
    report_path.write_text(emit_json(report), encoding="utf-8")
    (tree / "report.html").write_text(render_html(report, tree), encoding="utf-8")

    hard_failures = any(s.reason in ("stage_failed", "capture_failed") for s in report.skipped)
    return (EXIT_SITE_FAILURES if hard_failures else EXIT_OK), report_path


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    tree = Path(args.tree)
    if not (tree / storage.RUN_META).is_file():
        raise ContractViolation(f"not a capture tree (no {storage.RUN_META}): {tree}")
    backend = _make_backend(cfg, args)
    flags = StageFlags(ads_enabled=args.ads_enabled, dynamics_enabled=args.dynamics_enabled)
    code, report_path = analyze_tree(tree, cfg, backend, flags, workers=cfg.workers)
    print(f"report written to {report_path}")
    return code


# --- evaluate ----------------------------------------------------------------


def cmd_evaluate(args: argparse.Namespace) -> int:
    report = load_report(args.report)
    truth = load_truth_csv(args.truth)
    result = score_run(report, truth)
    out = args.out or str(Path(args.report).with_name("eval.json"))
    Path(out).write_text(emit_eval_json(result), encoding="utf-8")
    print(format_eval_summary(result), end="")
    print(f"eval written to {out}")
    return EXIT_OK


# --- regress ----------------------------------------------------------------


def cmd_regress(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if not cfg.is_regression_pair():
        raise ContractViolation(
            "regress needs two versions of one browser: both [[browsers]] entries must share a name"
        )
    browsers = tuple(
        b if b.version_label else BrowserConfig(
            name=b.name,
            webdriver_endpoint=b.webdriver_endpoint,
            version_label=default_label,
            headless=b.headless,
            viewport_width=b.viewport_width,
            page_load_timeout=b.page_load_timeout,
        )
        for b, default_label in zip(cfg.browsers, ("versionA", "versionB"))
    )
    cfg = replace(cfg, browsers=browsers)
    run_id = args.run_id or _default_run_id()
    tree = Path(args.out or cfg.output_root) / run_id
    code = _run_capture(cfg, _parse_urls_file(args.urls), tree, run_id)
    backend = _make_backend(cfg, args)
    analyze_code, report_path = analyze_tree(tree, cfg, backend, StageFlags(), workers=cfg.workers)
    print(f"regression report written to {report_path}")
    return max(code, analyze_code)


# --- fixtures ----------------------------------------------------------------


def cmd_fixtures_gen(args: argparse.Namespace) -> int:
    if args.manifest:
        manifest = fixtures.load_manifest(args.manifest)
    else:
        manifest = fixtures.default_manifest(seed=args.seed)
    out = fixtures.generate_corpus(manifest, args.out)
    print(f"generated {len(manifest.specs)} site(s) under {out}")
    return EXIT_OK


def cmd_fixtures_serve(args: argparse.Namespace) -> int:
    host, _, port = args.bind.partition(":")
    server = fixtures.FixtureServer(args.tree, (host or "127.0.0.1", int(port or 0))).start()
    print(f"serving {args.tree} at {server.base_url} (Ctrl+C to stop)")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.shutdown()
    return EXIT_OK


def cmd_fixtures_mockmap(args: argparse.Namespace) -> int:
    manifest = fixtures.load_manifest(args.manifest)
    mapping = fixtures.build_mock_mapping(args.tree, manifest)
    fixtures.write_mock_mapping(mapping, args.out)
    print(f"mock mapping for {len(mapping['sites'])} site(s) written to {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
