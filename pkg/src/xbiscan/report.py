"""Run reports: canonical JSON and a static HTML visualization.

Pop-up related findings are isolated into a separate table so reviewers can
focus the main table on differences that are more likely to be genuine.
The HTML is dependency-free static markup that opens straight from disk;
every piece of model-controlled text is escaped.
"""

from __future__ import annotations

import html
import json
from dataclasses import dataclass, replace
from pathlib import Path

from .detector import (
    SiteAnalysis,
    XbiFinding,
    site_analysis_from_dict,
    site_analysis_to_dict,
)
from .errors import ContractViolation
from .impact import IMPACT_ORDER, ImpactScore, severity_sort_key

SCHEMA_VERSION = 1

SKIP_REASONS = ("blocked_precapture", "capture_failed", "stage_failed")


@dataclass(frozen=True)
class SkipEntry:
    site_id: str
    reason: str
    detail: str = ""

    def __post_init__(self) -> None:
        if self.reason not in SKIP_REASONS:
            raise ContractViolation(f"skip reason must be one of {SKIP_REASONS}, got {self.reason!r}")


@dataclass
class RunReport:
    run_id: str
    created_at: str
    config_digest: str
    browsers: list[dict]  # [{"slug": ..., "label": ...}, ...] in pair order
    sites: list[SiteAnalysis]
    popup_table: list[tuple[str, XbiFinding]]
    skipped: list[SkipEntry]
    summary_counts: dict[ImpactScore, int]


def build_report(
    analyses: list[SiteAnalysis],
    skips: list[SkipEntry],
    *,
    run_id: str,
    created_at: str,
    config_digest: str,
    browsers: list[dict],
) -> RunReport:
    """Assemble a report: severity-descending site order, pop-up findings
    moved to their own table, per-impact summary counts."""
    seen: set[str] = set()
    for analysis in analyses:
        if analysis.site_id in seen:
            raise ContractViolation(f"duplicate site_id: {analysis.site_id!r}")
        seen.add(analysis.site_id)

    ordered = sorted(analyses, key=lambda a: (severity_sort_key(a.xbi.impact), a.site_id))

    sites: list[SiteAnalysis] = []
    popup_table: list[tuple[str, XbiFinding]] = []
    for analysis in ordered:
        main = tuple(f for f in analysis.xbi.findings if not f.involves_popup)
        for finding in analysis.xbi.findings:
            if finding.involves_popup:
                popup_table.append((analysis.site_id, finding))
        if len(main) != len(analysis.xbi.findings):
            analysis = replace_xbi_findings(analysis, main)
        sites.append(analysis)

    counts = {label: 0 for label in IMPACT_ORDER}
    for analysis in sites:
        counts[analysis.xbi.impact] += 1

    return RunReport(
        run_id=run_id,
        created_at=created_at,
        config_digest=config_digest,
        browsers=browsers,
        sites=sites,
        popup_table=popup_table,
        skipped=sorted(skips, key=lambda s: s.site_id),
        summary_counts=counts,
    )


def replace_xbi_findings(analysis: SiteAnalysis, findings: tuple[XbiFinding, ...]) -> SiteAnalysis:
    new_xbi = replace(analysis.xbi, findings=findings)
    return SiteAnalysis(
        site_id=analysis.site_id,
        stage_flags=analysis.stage_flags,
        xbi=new_xbi,
        ads=analysis.ads,
        dynamics=analysis.dynamics,
        warnings=list(analysis.warnings),
        xbi_original=analysis.xbi_original,
    )


# --- canonical JSON -------------------------------------------------------------


def report_to_dict(report: RunReport) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "run_id": report.run_id,
        "created_at": report.created_at,
        "config_digest": report.config_digest,
        "browsers": report.browsers,
        "sites": [site_analysis_to_dict(site) for site in report.sites],
        "popup_table": [
            {
                "site_id": site_id,
                "finding": {"description": f.description, "involves_popup": f.involves_popup},
            }
            for site_id, f in report.popup_table
        ],
        "skipped": [
            {"site_id": s.site_id, "reason": s.reason, "detail": s.detail} for s in report.skipped
        ],
        "summary_counts": {label.label: report.summary_counts.get(label, 0) for label in IMPACT_ORDER},
    }


def emit_json(report: RunReport) -> str:
    """Canonical serialization: stable key order, compact separators, UTF-8.

    Semantically equal reports serialize to byte-identical strings, and the
    output round-trips losslessly through parse_report.
    """
    return json.dumps(report_to_dict(report), sort_keys=True, ensure_ascii=False, separators=(",", ":")) + "\n"


def parse_report(text: str) -> RunReport:
    data = json.loads(text)
    if data.get("schema") != SCHEMA_VERSION:
        raise ContractViolation(f"unsupported report schema: {data.get('schema')!r}")
    return RunReport(
        run_id=data["run_id"],
        created_at=data["created_at"],
        config_digest=data["config_digest"],
        browsers=list(data["browsers"]),
        sites=[site_analysis_from_dict(d) for d in data["sites"]],
        popup_table=[
            (row["site_id"], XbiFinding(row["finding"]["description"], row["finding"]["involves_popup"]))
            for row in data["popup_table"]
        ],
        skipped=[SkipEntry(s["site_id"], s["reason"], s.get("detail", "")) for s in data["skipped"]],
        summary_counts={
            ImpactScore(label): count for label, count in data["summary_counts"].items()
        },
    )


def load_report(path: str | Path) -> RunReport:
    return parse_report(Path(path).read_text(encoding="utf-8"))


# --- HTML rendering -------------------------------------------------------------

_BADGE_COLORS = {
    ImpactScore.NO_XBI: "#8a8a8a",
    ImpactScore.MINOR_VISUAL: "#c9a227",
    ImpactScore.SIGNIFICANT_VISUAL: "#c0392b",
    ImpactScore.BLOCKED_UNSUPPORTED: "#7d3c98",
}

_PAGE_STYLE = (
    "body{font-family:sans-serif;margin:24px;color:#222}"
    "table{border-collapse:collapse;margin:12px 0;width:100%}"
    "th,td{border:1px solid #bbb;padding:6px 10px;vertical-align:top;text-align:left}"
    "th{background:#eee}"
    "img{max-width:360px;height:auto;border:1px solid #999;display:block}"
    ".badge{color:#fff;border-radius:4px;padding:2px 8px;font-size:0.85em;white-space:nowrap}"
    ".warn{color:#a33;font-size:0.9em}"
    ".muted{color:#777}"
)


def _badge(impact: ImpactScore) -> str:
    return f'<span class="badge" style="background:{_BADGE_COLORS[impact]}">{html.escape(impact.label)}</span>'


def _image_cell(image_root: Path, rel: str, warnings: list[str]) -> str:
    if (image_root / rel).is_file():
        return f'<a href="{html.escape(rel)}"><img src="{html.escape(rel)}" alt="overlay"></a>'
    warnings.append(f"missing image: {rel}")
    return f'<span class="warn">missing image: {html.escape(rel)}</span>'


def render_html(report: RunReport, image_root: str | Path) -> str:
    """Self-contained triage page: summary counts, main findings with
    side-by-side overlays, the separate pop-up table, and skipped sites.

    A referenced overlay that is missing on disk renders as a placeholder
    cell plus a warning banner; it never aborts the report.
    """
    image_root = Path(image_root)
    warnings: list[str] = []
    slug_a, slug_b = (b["slug"] for b in report.browsers[:2])
    label_a, label_b = (b["label"] for b in report.browsers[:2])

    parts: list[str] = []
    parts.append("<!DOCTYPE html>")
    parts.append('<html lang="en"><head><meta charset="utf-8">')
    parts.append(f"<title>xbiscan report {html.escape(report.run_id)}</title>")
    parts.append(f"<style>{_PAGE_STYLE}</style></head><body>")
    parts.append(f"<h1>Run {html.escape(report.run_id)}</h1>")
    parts.append(
        f'<p class="muted">created {html.escape(report.created_at)} · '
        f"browsers: {html.escape(label_a)} vs {html.escape(label_b)} · "
        f"config {html.escape(report.config_digest[:12])}</p>"
    )

    parts.append("<h2>Summary</h2><table><tr>")
    parts.append("".join(f"<th>{html.escape(label.label)}</th>" for label in IMPACT_ORDER))
    parts.append("</tr><tr>")
    parts.append(
        "".join(f"<td>{report.summary_counts.get(label, 0)}</td>" for label in IMPACT_ORDER)
    )
    parts.append("</tr></table>")

    parts.append("<h2>Findings</h2>")
    parts.append(
        "<table><tr><th>site</th><th>impact</th>"
        f"<th>{html.escape(label_a)}</th><th>{html.escape(label_b)}</th>"
        "<th>findings</th></tr>"
    )
    for site in report.sites:
        cell_a = _image_cell(image_root, f"{site.site_id}/{slug_a}/overlay.png", warnings)
        cell_b = _image_cell(image_root, f"{site.site_id}/{slug_b}/overlay.png", warnings)
        findings_html = (
            "<ul>" + "".join(f"<li>{html.escape(f.description)}</li>" for f in site.xbi.findings) + "</ul>"
            if site.xbi.findings
            else '<span class="muted">none</span>'
        )
        if site.xbi.post_filter == "dropped_blocked":
            findings_html += '<div class="muted">demoted by the blocked-page screen</div>'
        parts.append(
            f"<tr><td>{html.escape(site.site_id)}</td><td>{_badge(site.xbi.impact)}</td>"
            f"<td>{cell_a}</td><td>{cell_b}</td><td>{findings_html}</td></tr>"
        )
    parts.append("</table>")

    parts.append("<h2>Pop-up related findings</h2>")
    if report.popup_table:
        parts.append("<table><tr><th>site</th><th>finding</th></tr>")
        for site_id, finding in report.popup_table:
            parts.append(
                f"<tr><td>{html.escape(site_id)}</td><td>{html.escape(finding.description)}</td></tr>"
            )
        parts.append("</table>")
    else:
        parts.append('<p class="muted">none</p>')

    parts.append("<h2>Skipped sites</h2>")
    if report.skipped:
        parts.append("<table><tr><th>site</th><th>reason</th><th>detail</th></tr>")
        for skip in report.skipped:
            parts.append(
                f"<tr><td>{html.escape(skip.site_id)}</td><td>{html.escape(skip.reason)}</td>"
                f"<td>{html.escape(skip.detail)}</td></tr>"
            )
        parts.append("</table>")
    else:
        parts.append('<p class="muted">none</p>')

    if warnings:
        parts.append("<h2>Warnings</h2><ul>")
        parts.extend(f'<li class="warn">{html.escape(w)}</li>' for w in warnings)
        parts.append("</ul>")

    parts.append("</body></html>")
    return "\n".join(parts)
