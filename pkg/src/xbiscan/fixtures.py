"""Offline fixture corpus: paired sites with injected, labeled differences.

Generates, for each site, a small HTML page per browser variant (served by a
local HTTP server for real-browser runs) plus deterministic pre-rendered PNG
frames (the frame-import path for environments without a browser), together
with a ground-truth CSV in the evaluation module's format.

Each injection maps to a fixed truth label:

    none, ad_slot, carousel, video_placeholder  -> no-XBI
    font_change                                 -> minor-visual
    layout_shift, missing_image, blank_page,
    popup_banner                                -> significant-visual
    unsupported_banner                          -> blocked-unsupported
    blocked_403, blocked_bot                    -> no-XBI (filtered out before
                                                   analysis; never scored)
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from . import storage
from .capture import (
    DEFAULT_BLOCKED_KEYWORDS,
    BrowserConfig,
    ScreenshotSet,
    detect_blocked_page,
)
from .composite import content_hash, load_png, overlay, save_png
from .detector import DEFAULT_PIXEL_BUDGET, prepare_upload, prepare_upload_pair, stage3_images
from .errors import ContractViolation
from .evaluate import TruthRecord, write_truth_csv
from .impact import ImpactScore

INJECTIONS = (
    "none",
    "layout_shift",
    "missing_image",
    "blank_page",
    "unsupported_banner",
    "font_change",
    "popup_banner",
    "ad_slot",
    "carousel",
    "video_placeholder",
    "blocked_403",
    "blocked_bot",
)

VARIANT_AXES = ("per_browser", "per_reload", "static")

VARIANTS = ("a", "b")

# (impact, ads_present, dynamics_present) per injection; see module docstring.
INJECTION_TRUTH: dict[str, tuple[ImpactScore, bool, bool]] = {
    "none": (ImpactScore.NO_XBI, False, False),
    "layout_shift": (ImpactScore.SIGNIFICANT_VISUAL, False, False),
    "missing_image": (ImpactScore.SIGNIFICANT_VISUAL, False, False),
    "blank_page": (ImpactScore.SIGNIFICANT_VISUAL, False, False),
    "unsupported_banner": (ImpactScore.BLOCKED_UNSUPPORTED, False, False),
    "font_change": (ImpactScore.MINOR_VISUAL, False, False),
    "popup_banner": (ImpactScore.SIGNIFICANT_VISUAL, False, False),
    "ad_slot": (ImpactScore.NO_XBI, True, False),
    "carousel": (ImpactScore.NO_XBI, False, True),
    "video_placeholder": (ImpactScore.NO_XBI, False, True),
    "blocked_403": (ImpactScore.NO_XBI, False, False),
    "blocked_bot": (ImpactScore.NO_XBI, False, False),
}

_DEFAULT_AXIS: dict[str, str] = {
    "layout_shift": "per_browser",
    "missing_image": "per_browser",
    "blank_page": "per_browser",
    "unsupported_banner": "per_browser",
    "font_change": "per_browser",
    "popup_banner": "per_browser",
    "carousel": "per_reload",
}

BURST_FRAMES = 5
PAGE_W, PAGE_H = 640, 800
BLOCKED_H = 400
CAROUSEL_SLIDES = 3

POPUP_SELECTOR = "#cookie-accept"
POPUP_BUTTON_TEXT = "Accept all"

# Background palette for per_reload variation: (css hex, rgb).
_BG_PALETTE = (
    ("#ffffff", (255, 255, 255)),
    ("#f2e8dc", (242, 232, 220)),
    ("#dce8f2", (220, 232, 242)),
    ("#e4f2dc", (228, 242, 220)),
    ("#f2dcea", (242, 220, 234)),
)

_SLIDE_COLORS = (
    ("#b04a4a", (176, 74, 74)),
    ("#4a7ab0", (74, 122, 176)),
    ("#4ab06a", (74, 176, 106)),
)


@dataclass(frozen=True)
class FixtureSpec:
    site_id: str
    injection: str
    variant_axis: str = "static"

    def __post_init__(self) -> None:
        if not self.site_id or "/" in self.site_id:
            raise ContractViolation(f"bad site_id: {self.site_id!r}")
        if self.injection not in INJECTIONS:
            raise ContractViolation(f"unknown injection: {self.injection!r}")
        if self.variant_axis not in VARIANT_AXES:
            raise ContractViolation(f"unknown variant_axis: {self.variant_axis!r}")

    @property
    def truth(self) -> TruthRecord:
        impact, ads, dyn = INJECTION_TRUTH[self.injection]
        return TruthRecord(site_id=self.site_id, impact=impact, ads_present=ads, dynamics_present=dyn)


@dataclass(frozen=True)
class CorpusManifest:
    specs: tuple[FixtureSpec, ...]
    seed: int = 7

    def __post_init__(self) -> None:
        ids = [spec.site_id for spec in self.specs]
        if len(ids) != len(set(ids)):
            raise ContractViolation("duplicate site_id in manifest")

    def spec_for(self, site_id: str) -> FixtureSpec | None:
        return next((s for s in self.specs if s.site_id == site_id), None)


def default_manifest(seed: int = 7) -> CorpusManifest:
    """One site per injection kind."""
    ids = {
        "none": "st01",
        "layout_shift": "ls01",
        "missing_image": "mi01",
        "blank_page": "bp01",
        "unsupported_banner": "ub01",
        "font_change": "fc01",
        "popup_banner": "pb01",
        "ad_slot": "ad01",
        "carousel": "ca01",
        "video_placeholder": "vp01",
        "blocked_403": "blk01",
        "blocked_bot": "bot01",
    }
    specs = tuple(
        FixtureSpec(site_id=ids[injection], injection=injection, variant_axis=_DEFAULT_AXIS.get(injection, "static"))
        for injection in INJECTIONS
    )
    return CorpusManifest(specs=specs, seed=seed)


def manifest_to_dict(manifest: CorpusManifest) -> dict:
    return {
        "seed": manifest.seed,
        "specs": [
            {"site_id": s.site_id, "injection": s.injection, "variant_axis": s.variant_axis}
            for s in manifest.specs
        ],
    }


def load_manifest(path: str | Path) -> CorpusManifest:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    specs = tuple(
        FixtureSpec(
            site_id=entry["site_id"],
            injection=entry["injection"],
            variant_axis=entry.get("variant_axis", _DEFAULT_AXIS.get(entry["injection"], "static")),
        )
        for entry in data["specs"]
    )
    return CorpusManifest(specs=specs, seed=int(data.get("seed", 7)))


# --- deterministic drawing ------------------------------------------------------


def _accent(seed: int, site_id: str) -> tuple[int, int, int]:
    import hashlib

    digest = hashlib.sha256(f"{seed}:{site_id}".encode()).digest()
    return tuple(64 + b % 136 for b in digest[:3])  # mid-range, never too dark/light


def _font() -> ImageFont.ImageFont:
    return ImageFont.load_default()


def _new_page(width: int, height: int, bg: tuple[int, int, int]) -> Image.Image:
    return Image.new("RGB", (width, height), bg)


def _draw_chrome(draw: ImageDraw.ImageDraw, width: int, height: int, site_id: str) -> None:
    font = _font()
    draw.rectangle([0, 0, width, 56], fill=(40, 44, 70))
    draw.text((16, 20), site_id, fill=(255, 255, 255), font=font)
    draw.rectangle([0, 56, width, 84], fill=(225, 228, 235))
    draw.text((16, 64), "Home  Products  About  Contact", fill=(60, 60, 60), font=font)
    draw.rectangle([0, height - 40, width, height], fill=(70, 70, 70))
    draw.text((16, height - 32), "fixture footer", fill=(235, 235, 235), font=font)


def _draw_text_block(
    draw: ImageDraw.ImageDraw,
    top: int,
    *,
    width: int = PAGE_W,
    right_margin: int = 24,
    color: tuple[int, int, int] = (120, 120, 120),
    x_offset: int = 0,
) -> None:
    widths = (0.95, 0.88, 0.97, 0.74, 0.91, 0.52)
    for i, frac in enumerate(widths):
        y = top + i * 22
        line_w = int((width - 24 - right_margin) * frac)
        draw.rectangle([24 + x_offset, y, 24 + x_offset + line_w, y + 10], fill=color)


def _draw_hero(draw, accent, label, top=104, bottom=296, width=PAGE_W) -> None:
    draw.rectangle([24, top, width - 24, bottom], fill=accent)
    draw.text((40, top + 16), label, fill=(255, 255, 255), font=_font())


def render_frame(
    spec: FixtureSpec,
    variant: str,
    frame_index: int,
    seed: int,
    *,
    visit: int = 0,
    dismissed: bool = False,
) -> np.ndarray:
    """Draw one synthetic full-page frame for a site variant.

    Pure function of its arguments, so generated assets are byte-stable
    under a fixed seed.
    """
    injection = spec.injection
    accent = _accent(seed, spec.site_id)

    if injection == "blocked_403":
        return _render_message_page("403 Forbidden", "Access to this resource on the server is denied.")
    if injection == "blocked_bot":
        return _render_message_page(
            "Sorry, you have been blocked", "Complete a check to continue to the site."
        )
    if injection == "blank_page" and variant == "b":
        return np.asarray(_new_page(PAGE_W, PAGE_H, (255, 255, 255)), dtype=np.uint8)

    width = PAGE_W
    height = PAGE_H
    if injection == "layout_shift" and variant == "b":
        height = PAGE_H + 80
    if injection == "font_change" and variant == "b":
        width = PAGE_W - 6  # scrollbar-narrowed

    bg = (255, 255, 255)
    if spec.variant_axis == "per_reload" and injection != "carousel":
        bg = _BG_PALETTE[(seed + visit) % len(_BG_PALETTE)][1]

    page = _new_page(width, height, bg)
    draw = ImageDraw.Draw(page)
    _draw_chrome(draw, width, height, spec.site_id)

    hero_top = 104
    if injection == "unsupported_banner" and variant == "b":
        draw.rectangle([0, 84, width, 124], fill=(250, 220, 120))
        draw.text((16, 96), "This browser is not supported.", fill=(40, 40, 40), font=_font())
        hero_top = 140
    if injection == "layout_shift" and variant == "b":
        hero_top = 184

    hero_bottom = hero_top + 192
    if injection == "carousel":
        slide = (visit + frame_index) % CAROUSEL_SLIDES
        draw.rectangle([24, hero_top, width - 24, hero_bottom], fill=_SLIDE_COLORS[slide][1])
        draw.text((40, hero_top + 16), f"Slide {slide + 1}", fill=(255, 255, 255), font=_font())
    elif injection == "video_placeholder":
        draw.rectangle([24, hero_top, width - 24, hero_bottom], fill=(25, 25, 30))
        cx, cy = width // 2, (hero_top + hero_bottom) // 2
        draw.polygon([(cx - 18, cy - 24), (cx - 18, cy + 24), (cx + 24, cy)], fill=(220, 220, 220))
        draw.text((40, hero_bottom - 28), "Video", fill=(200, 200, 200), font=_font())
    else:
        _draw_hero(draw, accent, "Featured content", top=hero_top, bottom=hero_bottom, width=width)

    text_top = hero_bottom + 24
    text_right_margin = 24
    if injection == "ad_slot":
        # gray placeholder box marking an ad position, label and all
        draw.rectangle([width - 200, text_top, width - 24, text_top + 160], fill=(200, 200, 200))
        draw.rectangle([width - 200, text_top, width - 24, text_top + 160], outline=(140, 140, 140))
        draw.text((width - 130, text_top + 72), "Ad", fill=(90, 90, 90), font=_font())
        text_right_margin = 216
    text_color = (120, 120, 120)
    text_offset = 0
    if injection == "font_change" and variant == "b":
        text_color = (90, 90, 90)
        text_offset = 1
    _draw_text_block(
        draw, text_top, width=width, right_margin=text_right_margin, color=text_color, x_offset=text_offset
    )

    if injection == "missing_image":
        box = [24, text_top + 160, 312, text_top + 300]
        if variant == "a":
            draw.rectangle(box, fill=accent)
            draw.ellipse([100, text_top + 200, 180, text_top + 266], fill=(255, 255, 255))
        else:
            draw.rectangle(box, fill=(235, 235, 235), outline=(150, 150, 150))
            draw.line([box[0], box[1], box[2], box[3]], fill=(150, 150, 150), width=2)
            draw.line([box[0], box[3], box[2], box[1]], fill=(150, 150, 150), width=2)
            draw.text((box[0] + 12, box[1] + 12), "image", fill=(120, 120, 120), font=_font())

    if injection == "popup_banner" and variant == "a" and not dismissed:
        draw.rectangle([140, 280, 500, 460], fill=(255, 255, 255), outline=(40, 40, 40), width=2)
        draw.text((160, 300), "We use cookies", fill=(20, 20, 20), font=_font())
        draw.text((160, 330), "This demo site sets test cookies.", fill=(90, 90, 90), font=_font())
        draw.rectangle([340, 400, 480, 440], fill=accent)
        draw.text((362, 414), POPUP_BUTTON_TEXT, fill=(255, 255, 255), font=_font())

    return np.asarray(page, dtype=np.uint8)


def _render_message_page(title: str, body: str) -> np.ndarray:
    page = _new_page(PAGE_W, BLOCKED_H, (255, 255, 255))
    draw = ImageDraw.Draw(page)
    draw.text((40, 80), title, fill=(30, 30, 30), font=_font())
    draw.text((40, 120), body, fill=(110, 110, 110), font=_font())
    return np.asarray(page, dtype=np.uint8)


def page_text(spec: FixtureSpec, variant: str, *, dismissed: bool = False) -> str:
    """Visible text of a page, as a browser's innerText would report it."""
    injection = spec.injection
    if injection == "blocked_403":
        return "403 Forbidden\nAccess to this resource on the server is denied."
    if injection == "blocked_bot":
        return "Sorry, you have been blocked\nComplete a check to continue to the site."
    if injection == "blank_page" and variant == "b":
        return ""
    lines = [spec.site_id, "Home Products About Contact"]
    if injection == "unsupported_banner" and variant == "b":
        lines.append("This browser is not supported.")
    lines.append("Featured content" if injection not in ("carousel", "video_placeholder") else injection)
    if injection == "popup_banner" and variant == "a" and not dismissed:
        lines += ["We use cookies", "This demo site sets test cookies.", POPUP_BUTTON_TEXT]
    if injection == "ad_slot":
        lines.append("Ad")
    lines += [
        "Sample storefront copy used by the fixture corpus.",
        "Nothing on this page talks to the outside world.",
        "fixture footer",
    ]
    return "\n".join(lines)


# --- HTML page generation --------------------------------------------------------

_RELOAD_BG_TOKEN = "__BG__"
_RELOAD_IDX_TOKEN = "__RELOAD_IDX__"
_RELOAD_START_TOKEN = "__START__"


def render_page_html(spec: FixtureSpec, variant: str, seed: int) -> str:
    """Static HTML for real-browser runs; per_reload pages carry tokens the
    server substitutes per request."""
    injection = spec.injection
    accent = "#%02x%02x%02x" % _accent(seed, spec.site_id)
    if injection == "blocked_403":
        return (
            "<!DOCTYPE html><html><head><meta charset=\"utf-8\"><title>403</title></head>"
            "<body><h1>403 Forbidden</h1>"
            "<p>Access to this resource on the server is denied.</p></body></html>"
        )
    if injection == "blocked_bot":
        return (
            "<!DOCTYPE html><html><head><meta charset=\"utf-8\"><title>blocked</title></head>"
            "<body><h1>Sorry, you have been blocked</h1>"
            "<p>Complete a check to continue to the site.</p></body></html>"
        )
    if injection == "blank_page" and variant == "b":
        return "<!DOCTYPE html><html><head><meta charset=\"utf-8\"></head><body></body></html>"

    bg = "#ffffff"
    if spec.variant_axis == "per_reload" and injection != "carousel":
        # both the tint and the referenced background image vary per visit
        bg = f"{_RELOAD_BG_TOKEN} url('/assets/bg-{_RELOAD_IDX_TOKEN}.png')"

    banner = ""
    if injection == "unsupported_banner" and variant == "b":
        banner = '<div style="background:#fadc78;padding:10px">This browser is not supported.</div>'

    hero_style = f"background:{accent};height:190px;margin:16px;color:#fff;padding:10px"
    if injection == "layout_shift" and variant == "b":
        hero_style += ";margin-top:96px"
    hero = '<div class="hero" id="hero">Featured content</div>'
    script = ""
    if injection == "carousel":
        start = _RELOAD_START_TOKEN if spec.variant_axis == "per_reload" else "0"
        slides = json.dumps([c[0] for c in _SLIDE_COLORS])
        script = (
            "<script>var slides=" + slides + f";var i={start};"
            'var el=document.getElementById("hero");'
            'function show(){el.style.background=slides[i];el.textContent="Slide "+(i+1);}'
            "show();setInterval(function(){i=(i+1)%slides.length;show();},1000);</script>"
        )
    if injection == "video_placeholder":
        hero = (
            '<div class="hero" style="background:#19191e;color:#ddd;text-align:center;'
            'line-height:190px">&#9654; Video</div>'
        )

    extra_body = ""
    if injection == "missing_image":
        if variant == "a":
            extra_body = f'<div style="width:280px;height:140px;background:{accent};margin:16px"></div>'
        else:
            extra_body = (
                '<img src="/missing-asset.png" alt="image" '
                'style="width:280px;height:140px;border:1px solid #999;margin:16px">'
            )
    if injection == "ad_slot":
        extra_body = (
            '<div style="float:right;width:176px;height:160px;background:#c8c8c8;'
            'border:1px solid #8c8c8c;text-align:center;line-height:160px;margin:16px">Ad</div>'
        )
    if injection == "popup_banner" and variant == "a":
        extra_body += (
            '<div id="cookie-banner" style="position:fixed;left:20%;top:32%;width:56%;'
            'background:#fff;border:2px solid #282828;padding:24px">'
            "<h2>We use cookies</h2><p>This demo site sets test cookies.</p>"
            f'<button id="cookie-accept" '
            "onclick=\"document.getElementById('cookie-banner').remove()\">"
            f"{POPUP_BUTTON_TEXT}</button></div>"
        )

    body_font = "sans-serif"
    if injection == "font_change" and variant == "b":
        body_font = "serif"

    return f"""<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>{spec.site_id}</title>
<style>
body{{margin:0;font-family:{body_font};background:{bg}}}
header{{background:#282c46;color:#fff;padding:16px}}
nav{{background:#e1e4eb;padding:8px 16px}}
.hero{{{hero_style}}}
p{{color:#555;margin:8px 16px}}
footer{{background:#464646;color:#eee;padding:12px;margin-top:24px}}
</style></head>
<body>
<header><h1>{spec.site_id}</h1></header>
<nav>Home Products About Contact</nav>
{banner}
{hero}
{extra_body}
<p>Sample storefront copy used by the fixture corpus.</p>
<p>Nothing on this page talks to the outside world.</p>
<footer>fixture footer</footer>
{script}
</body></html>
"""


# --- corpus generation -------------------------------------------------------------


def generate_corpus(manifest: CorpusManifest, out: str | Path) -> Path:
    """Emit the full asset tree: pages, renders, meta, manifest, truth.csv.

    Deterministic: the same manifest (including seed) always produces a
    byte-identical tree.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(
        json.dumps(manifest_to_dict(manifest), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    write_truth_csv([spec.truth for spec in manifest.specs], out / "truth.csv")

    for spec in manifest.specs:
        for variant in VARIANTS:
            page_dir = out / "sites" / spec.site_id / variant
            page_dir.mkdir(parents=True, exist_ok=True)
            (page_dir / "index.html").write_text(
                render_page_html(spec, variant, manifest.seed), encoding="utf-8"
            )
            _write_renders(spec, variant, manifest.seed, out / "sites" / spec.site_id / "render" / variant)
    return out


def _write_renders(spec: FixtureSpec, variant: str, seed: int, render_dir: Path) -> None:
    render_dir.mkdir(parents=True, exist_ok=True)
    visit = 0 if variant == "a" else 1
    frames = []
    for i in range(BURST_FRAMES):
        name = f"frame_{i}.png"
        save_png(render_frame(spec, variant, i, seed, visit=visit), render_dir / name)
        frames.append(name)

    dismissed_frames: list[str] | None = None
    popups: list[dict] = []
    if spec.injection == "popup_banner" and variant == "a":
        dismissed_frames = []
        for i in range(BURST_FRAMES):
            name = f"dismissed_{i}.png"
            save_png(render_frame(spec, variant, i, seed, visit=visit, dismissed=True), render_dir / name)
            dismissed_frames.append(name)
        popups = [{"selector": POPUP_SELECTOR, "text": POPUP_BUTTON_TEXT}]

    meta = {
        "site_id": spec.site_id,
        "variant": variant,
        "injection": spec.injection,
        "text": page_text(spec, variant),
        "text_dismissed": page_text(spec, variant, dismissed=True),
        "frames": frames,
        "dismissed_frames": dismissed_frames,
        "popups": popups,
    }
    (render_dir / "meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


# --- frame-import path ---------------------------------------------------------------


def import_renders(
    corpus: str | Path,
    out_tree: str | Path,
    run_id: str,
    *,
    blocked_keywords: Sequence[str] = DEFAULT_BLOCKED_KEYWORDS,
    labels: tuple[str, str] | None = None,
    created_at: str | None = None,
) -> Path:
    """Build a capture tree from pre-rendered fixture frames, no browser needed.

    The blocked-page keyword pre-filter runs against each page's recorded
    text exactly as it would against a live page: blocked sites keep a single
    verification frame and their verdict in the sidecar.
    """
    corpus = Path(corpus)
    manifest = load_manifest(corpus / "manifest.json")
    tree = Path(out_tree) / run_id
    tree.mkdir(parents=True, exist_ok=True)

    for spec in manifest.specs:
        for variant in VARIANTS:
            render_dir = corpus / "sites" / spec.site_id / "render" / variant
            meta = json.loads((render_dir / "meta.json").read_text(encoding="utf-8"))
            verdict = detect_blocked_page(meta["text"], blocked_keywords)
            frame_names = meta["frames"][:1] if verdict else meta["frames"]
            frames = [load_png(render_dir / name) for name in frame_names]
            sset = ScreenshotSet(
                url=f"fixture:///{spec.site_id}/{variant}",
                browser=BrowserConfig(
                    name=variant,
                    webdriver_endpoint="import://renders",
                    viewport_width=frames[0].shape[1],
                ),
                frames=frames,
                capture_times=[float(i) for i in range(len(frames))],
                popup_dismissals=[],
                blocked=verdict,
            )
            storage.save_screenshot_set(storage.browser_dir(tree, spec.site_id, variant), sset)

    stamp = created_at or datetime.now(timezone.utc).isoformat(timespec="seconds")
    storage.write_run_meta(
        tree,
        storage.RunMeta(
            run_id=run_id,
            created_at=stamp,
            browser_slugs=list(VARIANTS),
            browser_labels=list(labels or VARIANTS),
            failures=[],
            source="renders",
        ),
    )
    return tree


# --- mock mapping -----------------------------------------------------------------

_ADS_COMPLETIONS = {
    "ad_slot": "Yes.\n- gray placeholder box marked 'Ad' in the right column",
}

_DYNAMIC_COMPLETIONS = {
    "carousel": "Yes.\n- carousel: hero region cycles between colored slides (ghosting visible)",
    "video_placeholder": "Yes.\n- video: dark player box with a play control",
}

_XBI_COMPLETIONS: dict[str, object] = {
    "layout_shift": "impact: significant-visual\n- the hero section sits lower in browser B, pushing everything below it down",
    "missing_image": "impact: significant-visual\n- a content image renders as an empty placeholder in browser B",
    "blank_page": "impact: significant-visual\n- the page renders completely blank in browser B",
    "unsupported_banner": "impact: blocked-unsupported\n- browser B shows a banner saying the browser is not supported",
    "font_change": "impact: minor-visual\n- body text uses slightly different font rendering in browser B",
    "popup_banner": "impact: significant-visual\n- a cookie consent pop-up appears only in browser A",
    # Adversarial branch: when the prompt carries no advertisement exclusions,
    # the ad slot gets misreported as a difference, mimicking an unassisted
    # third stage.
    "ad_slot": {
        "default": "impact: no-XBI",
        "no_ad_exclusions": "impact: significant-visual\n- the right-column banner area shows different content in the two browsers",
    },
}

MOCK_DEFAULTS = {
    "ads": "No.",
    "dynamic": "No.",
    "xbi": "impact: no-XBI",
    "blocked_check": "No.",
}


def build_mock_mapping(
    tree: str | Path,
    manifest: CorpusManifest,
    *,
    pixel_budget: int = DEFAULT_PIXEL_BUDGET,
) -> dict:
    """Key the deterministic mock backend to a captured tree.

    Walks the tree, computes the content hashes of exactly the images each
    stage would upload (overlays per browser; the cropped stage-3 pair in
    both overlay and first-frame modes), and maps them to per-site canned
    completions consistent with the corpus ground truth. Works for any
    capture method, including a real browser, because hashes come from the
    tree itself.
    """
    tree = Path(tree)
    hashes: dict[str, str] = {}
    sites: dict[str, dict] = {}
    slugs = storage.load_run_meta(tree).browser_slugs
    for site_id in storage.list_sites(tree):
        spec = manifest.spec_for(site_id)
        if spec is None:
            continue
        dirs = [storage.browser_dir(tree, site_id, slug) for slug in slugs]
        if not all((d / storage.CAPTURE_SIDECAR).is_file() for d in dirs):
            continue
        set_a = storage.load_screenshot_set(dirs[0])
        set_b = storage.load_screenshot_set(dirs[1])
        if set_a.blocked or set_b.blocked:
            continue
        for sset in (set_a, set_b):
            upload = prepare_upload(overlay(sset.frames).pixels, pixel_budget)
            hashes[content_hash(upload)] = site_id
        for mode in ("overlay", "first_frame"):
            img_a, img_b = stage3_images(set_a, set_b, mode)
            up_a, up_b = prepare_upload_pair(img_a, img_b, pixel_budget)
            hashes[content_hash(up_a)] = site_id
            hashes[content_hash(up_b)] = site_id
        sites[site_id] = _site_completions(spec)
    return {"defaults": dict(MOCK_DEFAULTS), "hashes": hashes, "sites": sites}


def _site_completions(spec: FixtureSpec) -> dict:
    entry: dict = {}
    if spec.injection in _ADS_COMPLETIONS:
        entry["ads"] = _ADS_COMPLETIONS[spec.injection]
    if spec.injection in _DYNAMIC_COMPLETIONS:
        entry["dynamic"] = _DYNAMIC_COMPLETIONS[spec.injection]
    if spec.injection in _XBI_COMPLETIONS:
        entry["xbi"] = _XBI_COMPLETIONS[spec.injection]
    return entry


def write_mock_mapping(mapping: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mapping, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# --- fixture HTTP server ---------------------------------------------------------------


class FixtureServer:
    """Serves a generated corpus at /{site_id}/{a|b}.

    blocked_403 sites answer HTTP 403; per_reload sites substitute their
    tokens from a seeded per-site counter, so responses are a pure function
    of (path, request counter, seed).
    """

    def __init__(self, tree: str | Path, bind: tuple[str, int] = ("127.0.0.1", 0)) -> None:
        self.tree = Path(tree)
        if not self.tree.is_dir():
            raise ContractViolation(f"corpus tree does not exist: {self.tree}")
        self.manifest = load_manifest(self.tree / "manifest.json")
        self._counters: dict[str, int] = {}
        self._lock = threading.Lock()
        fixture = self

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self) -> None:  # noqa: N802 (http.server API)
                fixture._handle(self)

            def log_message(self, *args: object) -> None:
                pass

        try:
            self._server = ThreadingHTTPServer(bind, Handler)
        except OSError as exc:
            raise ContractViolation(f"cannot bind fixture server to {bind}: {exc}") from exc
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def base_url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "FixtureServer":
        self._thread.start()
        return self

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "FixtureServer":
        return self.start()

    def __exit__(self, *exc_info: object) -> None:
        self.shutdown()

    def _next_visit(self, site_id: str) -> int:
        with self._lock:
            visit = self._counters.get(site_id, 0)
            self._counters[site_id] = visit + 1
        return visit

    def _handle(self, request: BaseHTTPRequestHandler) -> None:
        parts = [p for p in request.path.split("?")[0].split("/") if p]
        if len(parts) != 2 or parts[1] not in VARIANTS:
            _respond(request, 404, "not found")
            return
        site_id, variant = parts
        spec = self.manifest.spec_for(site_id)
        if spec is None:
            _respond(request, 404, "unknown site")
            return
        page_path = self.tree / "sites" / site_id / variant / "index.html"
        try:
            body = page_path.read_text(encoding="utf-8")
        except FileNotFoundError:
            _respond(request, 404, "page not generated")
            return
        if spec.variant_axis == "per_reload":
            visit = self._next_visit(site_id)
            index = (self.manifest.seed + visit) % len(_BG_PALETTE)
            body = body.replace(_RELOAD_START_TOKEN, str((self.manifest.seed + visit) % CAROUSEL_SLIDES))
            body = body.replace(_RELOAD_BG_TOKEN, _BG_PALETTE[index][0])
            body = body.replace(_RELOAD_IDX_TOKEN, str(index))
        status = 403 if spec.injection == "blocked_403" else 200
        _respond(request, status, body)


def _respond(request: BaseHTTPRequestHandler, status: int, body: str) -> None:
    payload = body.encode("utf-8")
    request.send_response(status)
    request.send_header("Content-Type", "text/html; charset=utf-8")
    request.send_header("Content-Length", str(len(payload)))
    request.end_headers()
    request.wfile.write(payload)
