"""Bug-report ingestion: fetch from issue trackers, normalize, filter.

Tracker clients speak a small HTTP+JSON contract (array of issue objects,
``?page=N`` pagination, empty array terminates) so tests run against a local
fixture server and never touch live trackers. Fields absent at the source
stay absent; nothing is fabricated.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence
from urllib.parse import urlparse

import requests

from .errors import ContractViolation, XbiscanError
from .impact import ImpactScore, impact_from_label

logger = logging.getLogger(__name__)

SOURCES = ("bugzilla", "webcompat", "manual")

_MOBILE_MARKERS = ("mobile", "android", "ios")


class TrackerTransportError(XbiscanError):
    """Network-level failure talking to a tracker; safe to retry."""


class TrackerSourceError(XbiscanError):
    """The tracker rejected the request (HTTP 4xx); retrying won't help."""


class TrackerParseError(XbiscanError):
    """The tracker returned a payload we cannot interpret."""


@dataclass(frozen=True)
class BugReport:
    """One tracked web-compatibility report."""

    bug_id: str
    source: str
    url: str | None = None
    browser: str | None = None
    browser_version: int | None = None
    summary: str = ""
    ground_truth_impact: ImpactScore | None = None

    def __post_init__(self) -> None:
        if not self.bug_id:
            raise ContractViolation("bug_id must be non-empty")
        if self.source not in SOURCES:
            raise ContractViolation(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.url is not None and not _is_absolute_http_url(self.url):
            raise ContractViolation(f"url must be an absolute http(s) URL, got {self.url!r}")


def _is_absolute_http_url(url: str) -> bool:
    parsed = urlparse(url)
    return parsed.scheme in ("http", "https") and bool(parsed.netloc)


@dataclass(frozen=True)
class FilterPolicy:
    """Which reports are analyzable.

    Checks run in fixed order (url, mobile, browser, version) and the first
    failure names the rejection reason. Reports lacking a browser version
    pass the version check: absence of evidence is not grounds for exclusion.
    """

    require_url: bool = True
    exclude_mobile: bool = True
    allowed_browsers: frozenset[str] = frozenset()
    min_browser_version: int | None = None

    def __post_init__(self) -> None:
        if self.min_browser_version is not None and self.min_browser_version < 1:
            raise ContractViolation("min_browser_version must be >= 1")


@dataclass(frozen=True)
class TrackerEndpoint:
    """Where to fetch reports from: base URL plus the source kind."""

    base_url: str
    source: str = "manual"


def fetch_reports(endpoint: TrackerEndpoint, query: str = "") -> list[BugReport]:
    """Fetch all reports matching a query, following pagination to exhaustion.

    Pages are requested as ``?q=<query>&page=N`` starting at 1; an empty
    array terminates. Raises TrackerTransportError on network failure,
    TrackerSourceError on HTTP 4xx, TrackerParseError on malformed payloads
    (naming the offending page and record index).
    """
    reports: list[BugReport] = []
    page = 1
    session = requests.Session()
    try:
        while True:
            try:
                resp = session.get(endpoint.base_url, params={"q": query, "page": page}, timeout=30)
            except requests.RequestException as exc:
                raise TrackerTransportError(f"fetch from {endpoint.base_url} failed: {exc}") from exc
            if 400 <= resp.status_code < 500:
                raise TrackerSourceError(
                    f"{endpoint.base_url} returned HTTP {resp.status_code} for page {page}"
                )
            if resp.status_code >= 500:
                raise TrackerTransportError(
                    f"{endpoint.base_url} returned HTTP {resp.status_code} for page {page}"
                )
            try:
                payload = resp.json()
            except ValueError as exc:
                raise TrackerParseError(f"page {page}: response is not JSON") from exc
            if not isinstance(payload, list):
                raise TrackerParseError(f"page {page}: expected a JSON array")
            if not payload:
                break
            for index, record in enumerate(payload):
                reports.append(_parse_record(record, endpoint.source, page, index))
            page += 1
    finally:
        session.close()
    logger.info("fetched %d reports from %s over %d page(s)", len(reports), endpoint.base_url, page)
    return reports


def _parse_record(record: object, source: str, page: int, index: int) -> BugReport:
    where = f"page {page} record {index}"
    if not isinstance(record, dict):
        raise TrackerParseError(f"{where}: expected an object")
    bug_id = record.get("id")
    if not isinstance(bug_id, (str, int)) or bug_id == "":
        raise TrackerParseError(f"{where}: missing or invalid 'id'")

    url = record.get("url")
    if url is not None and not isinstance(url, str):
        raise TrackerParseError(f"{where}: 'url' must be a string")

    browser = record.get("browser")
    if browser is not None and not isinstance(browser, str):
        raise TrackerParseError(f"{where}: 'browser' must be a string")

    version = record.get("version")
    if version is not None:
        if isinstance(version, bool) or not isinstance(version, int):
            raise TrackerParseError(f"{where}: 'version' must be an integer")

    impact_raw = record.get("impact")
    impact: ImpactScore | None = None
    if impact_raw is not None:
        if not isinstance(impact_raw, str):
            raise TrackerParseError(f"{where}: 'impact' must be a string")
        try:
            impact = impact_from_label(impact_raw)
        except ValueError as exc:
            raise TrackerParseError(f"{where}: {exc}") from exc

    try:
        return BugReport(
            bug_id=str(bug_id),
            source=source,
            url=url,
            browser=browser,
            browser_version=version,
            summary=str(record.get("summary", "")),
            ground_truth_impact=impact,
        )
    except ContractViolation as exc:
        raise TrackerParseError(f"{where}: {exc}") from exc


def filter_reports(
    reports: Sequence[BugReport], policy: FilterPolicy
) -> tuple[list[BugReport], list[tuple[BugReport, str]]]:
    """Partition reports into (kept, rejected-with-reason), preserving order.

    Total function: every input lands in exactly one output, each rejection
    carries the first failing rule's reason.
    """
    kept: list[BugReport] = []
    rejected: list[tuple[BugReport, str]] = []
    for report in reports:
        reason = _rejection_reason(report, policy)
        if reason is None:
            kept.append(report)
        else:
            rejected.append((report, reason))
    return kept, rejected


def _rejection_reason(report: BugReport, policy: FilterPolicy) -> str | None:
    if policy.require_url and report.url is None:
        return "no URL"
    browser = (report.browser or "").lower()
    if policy.exclude_mobile and any(marker in browser for marker in _MOBILE_MARKERS):
        return f"mobile browser: {report.browser}"
    if policy.allowed_browsers:
        allowed = {b.lower() for b in policy.allowed_browsers}
        if browser not in allowed:
            return f"browser not in allowed set: {report.browser or '(unknown)'}"
    if (
        policy.min_browser_version is not None
        and report.browser_version is not None
        and report.browser_version < policy.min_browser_version
    ):
        return f"browser version {report.browser_version} older than {policy.min_browser_version}"
    return None


# --- JSONL dataset persistence ----------------------------------------------


def save_reports_jsonl(reports: Iterable[BugReport], path: str | Path) -> None:
    """Write one BugReport per line as UTF-8 JSON."""
    seen: set[str] = set()
    with open(path, "w", encoding="utf-8") as fh:
        for report in reports:
            if report.bug_id in seen:
                raise ContractViolation(f"duplicate bug_id in dataset: {report.bug_id!r}")
            seen.add(report.bug_id)
            fh.write(json.dumps(_report_to_dict(report), sort_keys=True, ensure_ascii=False) + "\n")


def load_reports_jsonl(path: str | Path) -> list[BugReport]:
    reports: list[BugReport] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_num, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except ValueError as exc:
                raise TrackerParseError(f"line {line_num}: invalid JSON") from exc
            report = _report_from_dict(data, line_num)
            if report.bug_id in seen:
                raise ContractViolation(f"line {line_num}: duplicate bug_id {report.bug_id!r}")
            seen.add(report.bug_id)
            reports.append(report)
    return reports


def _report_to_dict(report: BugReport) -> dict:
    return {
        "bug_id": report.bug_id,
        "source": report.source,
        "url": report.url,
        "browser": report.browser,
        "browser_version": report.browser_version,
        "summary": report.summary,
        "ground_truth_impact": report.ground_truth_impact.label if report.ground_truth_impact else None,
    }


def _report_from_dict(data: dict, line_num: int) -> BugReport:
    try:
        impact_raw = data.get("ground_truth_impact")
        return BugReport(
            bug_id=data["bug_id"],
            source=data["source"],
            url=data.get("url"),
            browser=data.get("browser"),
            browser_version=data.get("browser_version"),
            summary=data.get("summary", ""),
            ground_truth_impact=impact_from_label(impact_raw) if impact_raw else None,
        )
    except (KeyError, ValueError, ContractViolation) as exc:
        raise TrackerParseError(f"line {line_num}: {exc}") from exc
