"""On-disk layout of a capture/analysis run.

    {out_root}/{run_id}/
      run.json                       run metadata: browsers, created_at, failures
      {site_id}/{browser_slug}/
        0.png, 1.png, ...            lossless burst frames by index
        capture.json                 capture times, dismissals, blocked verdict
        overlay.png / overlay.json   written at analysis time
      {site_id}/analysis.json        per-site sidecar (keeps pre-filter verdicts)
      report.json / report.html      written at analysis time
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .capture import BlockedVerdict, BrowserConfig, ScreenshotSet
from .composite import load_png, save_png
from .detector import SiteAnalysis, site_analysis_from_dict, site_analysis_to_dict
from .errors import ContractViolation

RUN_META = "run.json"
CAPTURE_SIDECAR = "capture.json"
ANALYSIS_SIDECAR = "analysis.json"


@dataclass
class RunMeta:
    run_id: str
    created_at: str
    browser_slugs: list[str]
    browser_labels: list[str]
    failures: list[dict] = field(default_factory=list)  # {site_id, reason, detail}
    source: str = "webdriver"  # webdriver | renders


def write_run_meta(tree: Path, meta: RunMeta) -> None:
    tree.mkdir(parents=True, exist_ok=True)
    (tree / RUN_META).write_text(
        json.dumps(
            {
                "run_id": meta.run_id,
                "created_at": meta.created_at,
                "browser_slugs": meta.browser_slugs,
                "browser_labels": meta.browser_labels,
                "failures": meta.failures,
                "source": meta.source,
            },
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )


def load_run_meta(tree: Path) -> RunMeta:
    path = tree / RUN_META
    if not path.is_file():
        raise ContractViolation(f"not a run tree (missing {RUN_META}): {tree}")
    data = json.loads(path.read_text(encoding="utf-8"))
    return RunMeta(
        run_id=data["run_id"],
        created_at=data["created_at"],
        browser_slugs=list(data["browser_slugs"]),
        browser_labels=list(data["browser_labels"]),
        failures=list(data.get("failures", [])),
        source=data.get("source", "webdriver"),
    )


def browser_dir(tree: Path, site_id: str, slug: str) -> Path:
    return tree / site_id / slug


def save_screenshot_set(directory: Path, sset: ScreenshotSet) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for index, frame in enumerate(sset.frames):
        save_png(frame, directory / f"{index}.png")
    sidecar = {
        "url": sset.url,
        "browser": _browser_to_dict(sset.browser),
        "capture_times": sset.capture_times,
        "popup_dismissals": sset.popup_dismissals,
        "blocked": (
            {
                "matched_keyword": sset.blocked.matched_keyword,
                "page_excerpt": sset.blocked.page_excerpt,
            }
            if sset.blocked
            else None
        ),
        "frame_count": len(sset.frames),
    }
    (directory / CAPTURE_SIDECAR).write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_screenshot_set(directory: Path) -> ScreenshotSet:
    sidecar_path = directory / CAPTURE_SIDECAR
    data = json.loads(sidecar_path.read_text(encoding="utf-8"))
    frames = [load_png(directory / f"{i}.png") for i in range(data["frame_count"])]
    blocked = None
    if data.get("blocked"):
        blocked = BlockedVerdict(
            matched_keyword=data["blocked"]["matched_keyword"],
            page_excerpt=data["blocked"]["page_excerpt"],
        )
    return ScreenshotSet(
        url=data["url"],
        browser=_browser_from_dict(data["browser"]),
        frames=frames,
        capture_times=list(data["capture_times"]),
        popup_dismissals=list(data.get("popup_dismissals", [])),
        blocked=blocked,
    )


def has_capture(tree: Path, site_id: str, slug: str) -> bool:
    return (browser_dir(tree, site_id, slug) / CAPTURE_SIDECAR).is_file()


def list_sites(tree: Path) -> list[str]:
    """Site directories holding at least one browser capture, sorted."""
    sites = []
    for entry in sorted(tree.iterdir()):
        if not entry.is_dir():
            continue
        if any(sub.is_dir() and (sub / CAPTURE_SIDECAR).is_file() for sub in entry.iterdir()):
            sites.append(entry.name)
    return sites


def save_analysis(tree: Path, analysis: SiteAnalysis) -> None:
    path = tree / analysis.site_id / ANALYSIS_SIDECAR
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(site_analysis_to_dict(analysis, include_original=True), sort_keys=True, indent=2)
        + "\n",
        encoding="utf-8",
    )


def load_analysis(tree: Path, site_id: str) -> SiteAnalysis:
    data = json.loads((tree / site_id / ANALYSIS_SIDECAR).read_text(encoding="utf-8"))
    return site_analysis_from_dict(data)


def _browser_to_dict(cfg: BrowserConfig) -> dict:
    return {
        "name": cfg.name,
        "version_label": cfg.version_label,
        "webdriver_endpoint": cfg.webdriver_endpoint,
        "headless": cfg.headless,
        "viewport_width": cfg.viewport_width,
        "page_load_timeout": cfg.page_load_timeout,
    }


def _browser_from_dict(data: dict) -> BrowserConfig:
    return BrowserConfig(
        name=data["name"],
        webdriver_endpoint=data["webdriver_endpoint"],
        version_label=data.get("version_label"),
        headless=data.get("headless", True),
        viewport_width=data.get("viewport_width", 1920),
        page_load_timeout=data.get("page_load_timeout", 30.0),
    )
