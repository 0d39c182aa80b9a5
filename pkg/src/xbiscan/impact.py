"""The four-level impact taxonomy used throughout the pipeline.

Canonical wire spellings are hyphenated (``no-XBI``, ``minor-visual``,
``significant-visual``, ``blocked-unsupported``); these appear in ground-truth
CSV files, mock mappings, and reports. Severity is ordinal for sorting:
no-XBI < minor-visual < {significant-visual, blocked-unsupported}, the last
two being unordered peers tie-broken alphabetically.
"""

from __future__ import annotations

import enum


class ImpactScore(enum.Enum):
    NO_XBI = "no-XBI"
    MINOR_VISUAL = "minor-visual"
    SIGNIFICANT_VISUAL = "significant-visual"
    BLOCKED_UNSUPPORTED = "blocked-unsupported"

    @property
    def label(self) -> str:
        """Canonical hyphenated spelling."""
        return self.value


# Fixed label order used by confusion matrices and reports.
IMPACT_ORDER: tuple[ImpactScore, ...] = (
    ImpactScore.NO_XBI,
    ImpactScore.MINOR_VISUAL,
    ImpactScore.SIGNIFICANT_VISUAL,
    ImpactScore.BLOCKED_UNSUPPORTED,
)

_SEVERITY_RANK = {
    ImpactScore.NO_XBI: 0,
    ImpactScore.MINOR_VISUAL: 1,
    ImpactScore.SIGNIFICANT_VISUAL: 2,
    ImpactScore.BLOCKED_UNSUPPORTED: 2,
}


def severity_rank(score: ImpactScore) -> int:
    """Ordinal severity; the two top categories share a rank."""
    return _SEVERITY_RANK[score]


def severity_sort_key(score: ImpactScore) -> tuple[int, str]:
    """Sort key for severity-descending ordering with alphabetic tie-break."""
    return (-severity_rank(score), score.label.lower())


def impact_from_label(label: str) -> ImpactScore:
    """Parse a canonical label, tolerating case and -/_/space separators.

    Raises ValueError for anything that does not normalize to one of the
    four labels.
    """
    normalized = _normalize(label)
    for score in IMPACT_ORDER:
        if normalized == _normalize(score.label):
            return score
    raise ValueError(f"unknown impact label: {label!r}")


def _normalize(text: str) -> str:
    out = text.strip().lower()
    for sep in ("_", " "):
        out = out.replace(sep, "-")
    while "--" in out:
        out = out.replace("--", "-")
    return out
