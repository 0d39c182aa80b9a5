"""Staged VLM analysis of screenshot pairs.

Three stages run in fixed order: advertisement detection and dynamic-element
detection per browser (so expected variability can be excluded), then
cross-browser inconsistency detection over the image pair with a four-level
impact score. A post-inference pass demotes findings that turn out to
describe blocked or unloaded pages.

Prompt templates are plain-text assets with named placeholders; operators may
point the pipeline at their own template directory.
"""

from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .backends import (
    AD_EXCLUSION_HEADER,
    DYNAMIC_EXCLUSION_HEADER,
    RateLimiter,
    RetryPolicy,
    VlmBackend,
    VlmParseError,
    VlmStageError,
    call_backend,
)
from .capture import ScreenshotSet
from .composite import OverlayImage, crop_to_common, overlay
from .errors import ContractViolation, XbiscanError
from .impact import IMPACT_ORDER, ImpactScore

logger = logging.getLogger(__name__)

DEFAULT_PIXEL_BUDGET = 4_000_000

DYNAMIC_KINDS = (
    "slider",
    "carousel",
    "progress_bar",
    "video",
    "dynamic_chart",
    "personalized_recommendation",
    "location_recommendation",
    "real_time_content",
    "other",
)

# A finding mentioning any of these is treated as pop-up related and routed
# to the report's separate pop-up table.
POPUP_KEYWORDS = ("pop-up", "popup", "modal", "dialog", "consent")

IMPACT_DEFINITIONS = """\
Impact labels:
- minor-visual: a difference exists but content and functionality are intact
  and most users would not notice. Examples: focus outline styling, a small
  font rendering difference that keeps text readable, slight misalignment, a
  different background colour.
- significant-visual: the page is unusable or visibly broken in one browser.
  It fails to load or renders unreadably, the layout is visibly wrong, or
  part of the content (text, images, video, a pop-up) or a feature is missing
  or hard to reach. Examples: a completely blank page, a missing toolbar
  button, a pop-up shown by only one browser.
- blocked-unsupported: the page reports that it does not support the user's
  browser. This counts as a finding: the site should normally be reachable,
  and a rendering bug may be what trips the support check.
- no-XBI: the renderings are consistent; no browser-attributable difference."""


class StageFailure(XbiscanError):
    """A pipeline stage failed hard for one site; carries the stage name."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


# --- result types -------------------------------------------------------------


@dataclass(frozen=True)
class AdFinding:
    present: bool
    regions: tuple[str, ...]
    raw_response: str


@dataclass(frozen=True)
class DynamicElement:
    kind: str
    description: str


@dataclass(frozen=True)
class DynFinding:
    present: bool
    elements: tuple[DynamicElement, ...]
    raw_response: str


@dataclass(frozen=True)
class XbiFinding:
    description: str
    involves_popup: bool


@dataclass(frozen=True)
class XbiResult:
    impact: ImpactScore
    findings: tuple[XbiFinding, ...]
    raw_response: str
    post_filter: str = "kept"  # kept | dropped_blocked
    post_filter_response: str | None = None


@dataclass(frozen=True)
class StageFlags:
    ads_enabled: bool = True
    dynamics_enabled: bool = True


@dataclass
class SiteAnalysis:
    site_id: str
    stage_flags: StageFlags
    xbi: XbiResult
    ads: tuple[AdFinding, AdFinding] | None = None
    dynamics: tuple[DynFinding, DynFinding] | None = None
    warnings: list[str] = field(default_factory=list)
    # Pre-demotion verdict; persisted to the per-site sidecar only, never to
    # the main report.
    xbi_original: XbiResult | None = None


# --- completion parsing ---------------------------------------------------------

_WORD = re.compile(r"[a-zA-Z]+")


def parse_yes_no(completion: str) -> bool:
    """The first standalone yes/no token (case-insensitive) decides."""
    for token in _WORD.findall(completion.lower()):
        if token == "yes":
            return True
        if token == "no":
            return False
    raise VlmParseError(f"no yes/no token in completion: {completion!r}", raw_response=completion)


def _normalize_labels(text: str) -> str:
    return re.sub(r"[-_\s]+", "-", text.lower())


def parse_impact(completion: str) -> ImpactScore:
    """Scan for the four canonical labels, insensitive to case and to
    hyphen/underscore/space separators. Exactly one distinct label must
    appear; zero or several is a parse error listing what was found."""
    normalized = _normalize_labels(completion)
    found = [score for score in IMPACT_ORDER if _normalize_labels(score.label) in normalized]
    if len(found) == 1:
        return found[0]
    candidates = [score.label for score in found]
    raise VlmParseError(
        f"expected exactly one impact label, found {candidates or 'none'} in: {completion!r}",
        raw_response=completion,
    )


def _dash_lines(completion: str) -> list[str]:
    lines = []
    for raw in completion.splitlines():
        stripped = raw.strip()
        if stripped.startswith("- ") and stripped[2:].strip():
            lines.append(stripped[2:].strip())
    return lines


def parse_ad_finding(completion: str) -> AdFinding:
    present = parse_yes_no(completion)
    regions = tuple(_dash_lines(completion)) if present else ()
    return AdFinding(present=present, regions=regions, raw_response=completion)


def parse_dyn_finding(completion: str) -> DynFinding:
    present = parse_yes_no(completion)
    elements: list[DynamicElement] = []
    if present:
        for line in _dash_lines(completion):
            kind, _, description = line.partition(":")
            kind_key = re.sub(r"[-\s]+", "_", kind.strip().lower())
            if kind_key in DYNAMIC_KINDS and description.strip():
                elements.append(DynamicElement(kind=kind_key, description=description.strip()))
            else:
                elements.append(DynamicElement(kind="other", description=line))
    return DynFinding(present=present, elements=tuple(elements), raw_response=completion)


def finding_involves_popup(description: str) -> bool:
    lowered = description.lower()
    return any(keyword in lowered for keyword in POPUP_KEYWORDS)


def parse_xbi_completion(completion: str) -> XbiResult:
    impact = parse_impact(completion)
    findings: tuple[XbiFinding, ...] = ()
    if impact is not ImpactScore.NO_XBI:
        findings = tuple(
            XbiFinding(description=line, involves_popup=finding_involves_popup(line))
            for line in _dash_lines(completion)
        )
    return XbiResult(impact=impact, findings=findings, raw_response=completion)


# --- prompt templates -----------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplates:
    ads: str
    dynamic: str
    xbi: str
    blocked_check: str

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "PromptTemplates":
        """Load templates from a directory, defaulting to the packaged ones."""
        if directory is None:
            root = resources.files("xbiscan").joinpath("prompts")
            read = lambda name: root.joinpath(name).read_text(encoding="utf-8")  # noqa: E731
        else:
            base = Path(directory)
            read = lambda name: (base / name).read_text(encoding="utf-8")  # noqa: E731
        return cls(
            ads=read("ads.txt"),
            dynamic=read("dynamic.txt"),
            xbi=read("xbi.txt"),
            blocked_check=read("blocked_check.txt"),
        )


def _exclusion_section(header: str, items: Sequence[str]) -> str:
    body = "\n".join(f"- {item}" for item in items) if items else "- (none identified)"
    return f"{header}\n{body}"


def render_stage3_prompt(
    templates: PromptTemplates,
    ads: tuple[AdFinding, AdFinding] | None,
    dynamics: tuple[DynFinding, DynFinding] | None,
) -> str:
    """Build the stage-3 prompt; exclusion sections appear exactly when the
    corresponding earlier stage ran. Region lists from both browsers are
    merged, preserving first-seen order."""
    ads_section = ""
    if ads is not None:
        regions = _dedupe(region for finding in ads for region in finding.regions)
        ads_section = _exclusion_section(AD_EXCLUSION_HEADER, regions)
    dyn_section = ""
    if dynamics is not None:
        elements = _dedupe(
            f"{element.kind}: {element.description}"
            for finding in dynamics
            for element in finding.elements
        )
        dyn_section = _exclusion_section(DYNAMIC_EXCLUSION_HEADER, elements)
    prompt = templates.xbi
    prompt = prompt.replace("{impact_definitions}", IMPACT_DEFINITIONS)
    prompt = prompt.replace("{exclusions_ads}", ads_section)
    prompt = prompt.replace("{exclusions_dynamic}", dyn_section)
    return _collapse_blank_runs(prompt)


def render_blocked_check_prompt(templates: PromptTemplates, result: XbiResult) -> str:
    findings = "\n".join(f"- {f.description}" for f in result.findings) or "- (no itemized findings)"
    return templates.blocked_check.replace("{findings}", findings)


def _dedupe(items) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    for item in items:
        if item not in seen:
            seen.add(item)
            out.append(item)
    return out


def _collapse_blank_runs(text: str) -> str:
    return re.sub(r"\n{3,}", "\n\n", text)


# --- image preparation -----------------------------------------------------------


def _pixels(image: OverlayImage | np.ndarray) -> np.ndarray:
    return image.pixels if isinstance(image, OverlayImage) else image


def _scale_for_budget(pixel_count: int, budget: int) -> float:
    if pixel_count <= budget:
        return 1.0
    return (budget / pixel_count) ** 0.5


def _resize(img: np.ndarray, scale: float) -> np.ndarray:
    if scale >= 1.0:
        return img
    h, w = img.shape[:2]
    new_w = max(1, int(w * scale))
    new_h = max(1, int(h * scale))
    resized = Image.fromarray(img, mode="RGB").resize((new_w, new_h), Image.LANCZOS)
    return np.asarray(resized, dtype=np.uint8)


def prepare_upload(image: OverlayImage | np.ndarray, pixel_budget: int = DEFAULT_PIXEL_BUDGET) -> np.ndarray:
    """Downscale a single image proportionally to the pixel budget."""
    px = _pixels(image)
    return _resize(px, _scale_for_budget(px.shape[0] * px.shape[1], pixel_budget))


def prepare_upload_pair(
    a: OverlayImage | np.ndarray,
    b: OverlayImage | np.ndarray,
    pixel_budget: int = DEFAULT_PIXEL_BUDGET,
) -> tuple[np.ndarray, np.ndarray]:
    """Downscale a pair with one shared factor so relative geometry survives."""
    pa, pb = _pixels(a), _pixels(b)
    worst = max(pa.shape[0] * pa.shape[1], pb.shape[0] * pb.shape[1])
    scale = _scale_for_budget(worst, pixel_budget)
    return _resize(pa, scale), _resize(pb, scale)


# --- stage operations ---------------------------------------------------------


@dataclass
class DetectorSettings:
    """Knobs shared by all stage calls."""

    templates: PromptTemplates = field(default_factory=PromptTemplates.load)
    limiter: RateLimiter | None = None
    retry: RetryPolicy = RetryPolicy()
    pixel_budget: int = DEFAULT_PIXEL_BUDGET
    stage3_input: str = "overlay"  # overlay | first_frame
    sleep: Callable[[float], None] = time.sleep

    def __post_init__(self) -> None:
        if self.stage3_input not in ("overlay", "first_frame"):
            raise ContractViolation(f"stage3_input must be overlay or first_frame, got {self.stage3_input!r}")


def _call(backend: VlmBackend, prompt: str, images: Sequence[np.ndarray], settings: DetectorSettings) -> str:
    return call_backend(
        backend,
        prompt,
        images,
        limiter=settings.limiter,
        retry=settings.retry,
        sleep=settings.sleep,
    )


def detect_ads(
    image: OverlayImage | np.ndarray,
    backend: VlmBackend,
    settings: DetectorSettings | None = None,
) -> AdFinding:
    """Stage 1: advertisement detection over one browser's overlay."""
    settings = settings or DetectorSettings()
    upload = prepare_upload(image, settings.pixel_budget)
    completion = _call(backend, settings.templates.ads, [upload], settings)
    return parse_ad_finding(completion)


def detect_dynamic(
    image: OverlayImage | np.ndarray,
    backend: VlmBackend,
    settings: DetectorSettings | None = None,
) -> DynFinding:
    """Stage 2: dynamic-element detection over one browser's overlay."""
    settings = settings or DetectorSettings()
    upload = prepare_upload(image, settings.pixel_budget)
    completion = _call(backend, settings.templates.dynamic, [upload], settings)
    return parse_dyn_finding(completion)


def detect_xbi(
    pair: tuple[OverlayImage | np.ndarray, OverlayImage | np.ndarray],
    ads: tuple[AdFinding, AdFinding] | None,
    dynamics: tuple[DynFinding, DynFinding] | None,
    backend: VlmBackend,
    settings: DetectorSettings | None = None,
) -> XbiResult:
    """Stage 3: inconsistency detection over the cropped image pair.

    Images attach in fixed order (browser A, then B). Exclusion lists from
    stages 1-2 are embedded exactly when those stages ran. A completion
    naming no valid impact label is a parse error, never silently no-XBI;
    nondeterministic backends get a single re-ask with a clarifier first.
    """
    settings = settings or DetectorSettings()
    pa, pb = _pixels(pair[0]), _pixels(pair[1])
    if pa.shape != pb.shape:
        raise ContractViolation("detect_xbi expects a pair already cropped to one size")
    upload_a, upload_b = prepare_upload_pair(pa, pb, settings.pixel_budget)
    prompt = render_stage3_prompt(settings.templates, ads, dynamics)
    completion = _call(backend, prompt, [upload_a, upload_b], settings)
    try:
        return parse_xbi_completion(completion)
    except VlmParseError:
        if backend.deterministic:
            raise
        clarified = prompt + "\n\nAnswer with exactly one impact label."
        completion = _call(backend, clarified, [upload_a, upload_b], settings)
        return parse_xbi_completion(completion)


def post_filter_blocked(
    result: XbiResult,
    pair: tuple[OverlayImage | np.ndarray, OverlayImage | np.ndarray],
    backend: VlmBackend,
    settings: DetectorSettings | None = None,
    warnings: list[str] | None = None,
) -> XbiResult:
    """Post-inference blocked-page screen; best-effort and never escalating.

    For verdicts other than no-XBI, the image pair plus the findings text go
    back to the backend; a positive answer demotes the result to no-XBI with
    post_filter=dropped_blocked. Backend failures leave the result untouched
    apart from a recorded warning.
    """
    if result.post_filter != "kept":
        raise ContractViolation("post_filter_blocked expects a result that has not been filtered")
    if result.impact is ImpactScore.NO_XBI:
        return result
    settings = settings or DetectorSettings()
    upload_a, upload_b = prepare_upload_pair(_pixels(pair[0]), _pixels(pair[1]), settings.pixel_budget)
    prompt = render_blocked_check_prompt(settings.templates, result)
    try:
        completion = _call(backend, prompt, [upload_a, upload_b], settings)
        blocked = parse_yes_no(completion)
    except (VlmStageError, VlmParseError) as exc:
        message = f"post-inference blocked check skipped: {exc}"
        logger.warning(message)
        if warnings is not None:
            warnings.append(message)
        return result
    if not blocked:
        return replace(result, post_filter_response=completion)
    return XbiResult(
        impact=ImpactScore.NO_XBI,
        findings=(),
        raw_response=result.raw_response,
        post_filter="dropped_blocked",
        post_filter_response=completion,
    )


def analyze_site(
    site_id: str,
    pair: tuple[ScreenshotSet, ScreenshotSet],
    backend: VlmBackend,
    flags: StageFlags = StageFlags(),
    settings: DetectorSettings | None = None,
) -> SiteAnalysis:
    """Run the enabled stages over one site's two screenshot sets.

    Overlays each burst, crops to a common size, then runs ads, dynamics,
    inconsistency detection, and the post-inference filter in order. Blocked
    sets must be short-circuited upstream. Stage failures raise StageFailure
    naming the stage so one bad site never poisons a run.
    """
    set_a, set_b = pair
    if set_a.blocked or set_b.blocked:
        raise ContractViolation(f"site {site_id}: blocked capture reached the analysis stage")
    settings = settings or DetectorSettings()

    overlay_a = overlay(set_a.frames)
    overlay_b = overlay(set_b.frames)
    if settings.stage3_input == "first_frame":
        img_a, img_b = crop_to_common(set_a.frames[0], set_b.frames[0])
    else:
        img_a, img_b = crop_to_common(overlay_a.pixels, overlay_b.pixels)

    warnings: list[str] = []
    ads: tuple[AdFinding, AdFinding] | None = None
    if flags.ads_enabled:
        ads = (
            _run_stage("ads", detect_ads, overlay_a, backend, settings),
            _run_stage("ads", detect_ads, overlay_b, backend, settings),
        )
    dynamics: tuple[DynFinding, DynFinding] | None = None
    if flags.dynamics_enabled:
        dynamics = (
            _run_stage("dynamic", detect_dynamic, overlay_a, backend, settings),
            _run_stage("dynamic", detect_dynamic, overlay_b, backend, settings),
        )
    try:
        xbi = detect_xbi((img_a, img_b), ads, dynamics, backend, settings)
    except (VlmStageError, VlmParseError) as exc:
        raise StageFailure("xbi", str(exc)) from exc

    filtered = post_filter_blocked(xbi, (img_a, img_b), backend, settings, warnings)
    return SiteAnalysis(
        site_id=site_id,
        stage_flags=flags,
        xbi=filtered,
        ads=ads,
        dynamics=dynamics,
        warnings=warnings,
        xbi_original=xbi if filtered.post_filter == "dropped_blocked" else None,
    )


def _run_stage(name, fn, image, backend, settings):
    try:
        return fn(image, backend, settings)
    except (VlmStageError, VlmParseError) as exc:
        raise StageFailure(name, str(exc)) from exc


def stage3_images(
    set_a: ScreenshotSet,
    set_b: ScreenshotSet,
    stage3_input: str = "overlay",
) -> tuple[np.ndarray, np.ndarray]:
    """The exact image pair stage 3 would see for these sets (pre-upload)."""
    if stage3_input == "first_frame":
        return crop_to_common(set_a.frames[0], set_b.frames[0])
    return crop_to_common(overlay(set_a.frames).pixels, overlay(set_b.frames).pixels)


# --- serialization --------------------------------------------------------------


def _ad_to_dict(f: AdFinding) -> dict:
    return {"present": f.present, "regions": list(f.regions), "raw_response": f.raw_response}


def _dyn_to_dict(f: DynFinding) -> dict:
    return {
        "present": f.present,
        "elements": [{"kind": e.kind, "description": e.description} for e in f.elements],
        "raw_response": f.raw_response,
    }


def xbi_to_dict(r: XbiResult) -> dict:
    return {
        "impact": r.impact.label,
        "findings": [
            {"description": f.description, "involves_popup": f.involves_popup} for f in r.findings
        ],
        "raw_response": r.raw_response,
        "post_filter": r.post_filter,
        "post_filter_response": r.post_filter_response,
    }


def site_analysis_to_dict(analysis: SiteAnalysis, include_original: bool = False) -> dict:
    data = {
        "site_id": analysis.site_id,
        "stage_flags": {
            "ads_enabled": analysis.stage_flags.ads_enabled,
            "dynamics_enabled": analysis.stage_flags.dynamics_enabled,
        },
        "ads": [_ad_to_dict(f) for f in analysis.ads] if analysis.ads else None,
        "dynamics": [_dyn_to_dict(f) for f in analysis.dynamics] if analysis.dynamics else None,
        "xbi": xbi_to_dict(analysis.xbi),
        "warnings": list(analysis.warnings),
    }
    if include_original:
        data["xbi_original"] = xbi_to_dict(analysis.xbi_original) if analysis.xbi_original else None
    return data


def _ad_from_dict(d: dict) -> AdFinding:
    return AdFinding(present=d["present"], regions=tuple(d["regions"]), raw_response=d["raw_response"])


def _dyn_from_dict(d: dict) -> DynFinding:
    return DynFinding(
        present=d["present"],
        elements=tuple(DynamicElement(e["kind"], e["description"]) for e in d["elements"]),
        raw_response=d["raw_response"],
    )


def xbi_from_dict(d: dict) -> XbiResult:
    return XbiResult(
        impact=ImpactScore(d["impact"]),
        findings=tuple(
            XbiFinding(f["description"], f["involves_popup"]) for f in d["findings"]
        ),
        raw_response=d["raw_response"],
        post_filter=d.get("post_filter", "kept"),
        post_filter_response=d.get("post_filter_response"),
    )


def site_analysis_from_dict(d: dict) -> SiteAnalysis:
    return SiteAnalysis(
        site_id=d["site_id"],
        stage_flags=StageFlags(
            ads_enabled=d["stage_flags"]["ads_enabled"],
            dynamics_enabled=d["stage_flags"]["dynamics_enabled"],
        ),
        xbi=xbi_from_dict(d["xbi"]),
        ads=tuple(_ad_from_dict(f) for f in d["ads"]) if d.get("ads") else None,
        dynamics=tuple(_dyn_from_dict(f) for f in d["dynamics"]) if d.get("dynamics") else None,
        warnings=list(d.get("warnings", [])),
        xbi_original=xbi_from_dict(d["xbi_original"]) if d.get("xbi_original") else None,
    )
