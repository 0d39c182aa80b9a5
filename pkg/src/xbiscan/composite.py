"""Screenshot burst compositing.

Merges a burst of full-page captures into one overlay image whose dynamic
regions appear ghosted (uniform mean of all frames), so downstream analysis
can tell moving content from static content. Also provides the pixel-exact
diff mask and the common-size crop used before comparing two browsers.

Images are numpy arrays of shape (height, width, 3), dtype uint8.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ContractViolation


@dataclass(frozen=True)
class OverlayImage:
    """Composite of a burst: mean-blended pixels plus change statistics.

    change_fraction is the exact fraction of pixels (over the common-size
    crop) at which any two source frames differ in any channel; it is 0
    iff all cropped frames are identical.
    """

    pixels: np.ndarray
    source_frame_count: int
    change_fraction: float

    @property
    def size(self) -> tuple[int, int]:
        """(width, height)."""
        return self.pixels.shape[1], self.pixels.shape[0]


def _check_image(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ContractViolation(
            f"expected uint8 RGB array of shape (h, w, 3), got {img.dtype} {img.shape}"
        )
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ContractViolation("image has a zero dimension")


def crop_frames_to_common(frames: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Top-left-anchored crop of every frame to the minimum (width, height)."""
    for f in frames:
        _check_image(f)
    h = min(f.shape[0] for f in frames)
    w = min(f.shape[1] for f in frames)
    return [np.ascontiguousarray(f[:h, :w]) for f in frames]


def overlay(frames: Sequence[np.ndarray]) -> OverlayImage:
    """Blend a burst into one overlay with uniform weights 1/N per frame.

    Frames are first cropped (top-left anchored) to the common minimum size.
    Channel values are the mean over frames, rounded half-up, so identical
    frames blend to themselves and moving content ghosts. The blend is
    permutation-invariant and idempotent by construction.
    """
    if len(frames) == 0:
        raise ContractViolation("overlay requires at least one frame")
    cropped = crop_frames_to_common(frames)
    n = len(cropped)
    total = np.zeros(cropped[0].shape, dtype=np.uint32)
    for f in cropped:
        total += f
    # round half-up: floor(s/n + 1/2) = (2s + n) // (2n)
    blended = ((2 * total + n) // (2 * n)).astype(np.uint8)

    if n >= 2:
        mask = diff_mask(cropped)
        change = int(np.count_nonzero(mask)) / mask.size
    else:
        change = 0.0
    return OverlayImage(pixels=blended, source_frame_count=n, change_fraction=change)


def diff_mask(frames: Sequence[np.ndarray]) -> np.ndarray:
    """Boolean (h, w) mask: set where any two frames differ in any channel.

    Frames must already share one size (pre-cropped).
    """
    if len(frames) < 2:
        raise ContractViolation("diff_mask requires at least two frames")
    shape = frames[0].shape
    for f in frames:
        _check_image(f)
        if f.shape != shape:
            raise ContractViolation(
                f"diff_mask frames must share dimensions, got {shape} vs {f.shape}"
            )
    first = frames[0]
    mask = np.zeros(shape[:2], dtype=bool)
    for f in frames[1:]:
        mask |= np.any(f != first, axis=2)
    return mask


def crop_to_common(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Crop both images, top-left anchored, to (min width, min height).

    Inputs are left unmodified; copies are returned.
    """
    _check_image(a)
    _check_image(b)
    h = min(a.shape[0], b.shape[0])
    w = min(a.shape[1], b.shape[1])
    if h == 0 or w == 0:
        raise ContractViolation("crop_to_common would produce a zero-area image")
    return np.ascontiguousarray(a[:h, :w]).copy(), np.ascontiguousarray(b[:h, :w]).copy()


# --- image IO and identity -------------------------------------------------


def load_png(path: str | Path) -> np.ndarray:
    """Load a PNG as a uint8 RGB array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_png(img: np.ndarray, path: str | Path) -> None:
    """Write a uint8 RGB array as a lossless PNG."""
    _check_image(img)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def save_mask_png(mask: np.ndarray, path: str | Path) -> None:
    """Write a boolean mask as an 8-bit grayscale PNG (set pixels = 255)."""
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def content_hash(img: np.ndarray) -> str:
    """Stable identity of image content: sha256 over dimensions + raw pixels.

    Independent of any file encoding, so a decoded PNG hashes the same as
    the array it was saved from.
    """
    _check_image(img)
    h = hashlib.sha256()
    h.update(f"{img.shape[1]}x{img.shape[0]}".encode("ascii"))
    h.update(np.ascontiguousarray(img).tobytes())
    return h.hexdigest()


def save_overlay(ov: OverlayImage, png_path: str | Path, sidecar_path: str | Path) -> None:
    """Persist an overlay as PNG plus a JSON sidecar with its statistics."""
    save_png(ov.pixels, png_path)
    Path(sidecar_path).write_text(
        json.dumps(
            {
                "source_frame_count": ov.source_frame_count,
                "change_fraction": ov.change_fraction,
            },
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )


def load_overlay(png_path: str | Path, sidecar_path: str | Path) -> OverlayImage:
    meta = json.loads(Path(sidecar_path).read_text(encoding="utf-8"))
    return OverlayImage(
        pixels=load_png(png_path),
        source_frame_count=int(meta["source_frame_count"]),
        change_fraction=float(meta["change_fraction"]),
    )
