"""Overlay blending, diff masks, and common-size cropping."""

from __future__ import annotations

import numpy as np
import pytest

from xbiscan.composite import (
    OverlayImage,
    content_hash,
    crop_to_common,
    diff_mask,
    load_png,
    overlay,
    save_png,
)
from xbiscan.errors import ContractViolation


def frame(h, w, value=0):
    return np.full((h, w, 3), value, dtype=np.uint8)


def rng_frames(seed, n, h, w):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8) for _ in range(n)]


class TestOverlay:
    def test_identical_frames_blend_to_themselves(self):
        frames = [frame(8, 6, 37)] * 5
        ov = overlay(frames)
        assert np.array_equal(ov.pixels, frames[0])
        assert ov.change_fraction == 0.0
        assert ov.source_frame_count == 5

    def test_black_white_blend_rounds_half_up_to_128(self):
        ov = overlay([frame(4, 4, 0), frame(4, 4, 255)])
        assert (ov.pixels == 128).all()  # (0+255)/2 = 127.5, rounded half-up
        assert ov.change_fraction == 1.0

    def test_change_fraction_counts_differing_region_exactly(self):
        base = frame(1000, 1000, 10)
        frames = [base.copy() for _ in range(3)]
        frames[1][100:200, 300:400] = 200  # one 100x100 patch
        frames[2][100:200, 300:400] = 90
        ov = overlay(frames)
        assert ov.change_fraction == pytest.approx(0.01, abs=0)

    def test_single_frame_is_its_own_overlay(self):
        f = rng_frames(0, 1, 5, 7)[0]
        ov = overlay([f])
        assert np.array_equal(ov.pixels, f)
        assert ov.change_fraction == 0.0

    def test_frames_cropped_to_common_minimum(self):
        ov = overlay([frame(10, 8, 50), frame(12, 6, 50)])
        assert ov.pixels.shape == (10, 6, 3)

    def test_empty_frame_list_rejected(self):
        with pytest.raises(ContractViolation):
            overlay([])

    def test_permutation_invariance(self):
        frames = rng_frames(1, 4, 16, 9)
        a = overlay(frames).pixels
        b = overlay(list(reversed(frames))).pixels
        assert a.tobytes() == b.tobytes()

    def test_idempotence(self):
        frames = rng_frames(2, 5, 12, 12)
        once = overlay(frames).pixels
        again = overlay([once]).pixels
        assert np.array_equal(once, again)

    def test_static_regions_preserved_outside_diff_mask(self):
        frames = rng_frames(3, 3, 20, 20)
        # force a static band
        for f in frames[1:]:
            f[:5] = frames[0][:5]
        ov = overlay(frames)
        mask = diff_mask(frames)
        assert not mask[:5].any()
        static = ~mask
        for f in frames:
            assert np.array_equal(ov.pixels[static], f[static])

    def test_change_fraction_zero_iff_frames_identical(self):
        frames = rng_frames(4, 3, 10, 10)
        assert overlay([frames[0], frames[0].copy()]).change_fraction == 0.0
        altered = frames[0].copy()
        altered[0, 0, 0] ^= 1
        assert overlay([frames[0], altered]).change_fraction > 0.0


class TestDiffMask:
    def test_identical_frames_all_clear(self):
        frames = [frame(6, 6, 99)] * 3
        assert not diff_mask(frames).any()

    def test_single_pixel_difference(self):
        a = frame(6, 6, 0)
        b = a.copy()
        b[2, 3, 1] = 1
        mask = diff_mask([a, b])
        assert mask.sum() == 1
        assert mask[2, 3]

    def test_mask_agrees_with_change_fraction(self):
        frames = rng_frames(5, 5, 30, 30)
        ov = overlay(frames)
        mask = diff_mask(frames)
        assert mask.sum() / mask.size == ov.change_fraction

    def test_requires_two_frames_same_size(self):
        with pytest.raises(ContractViolation):
            diff_mask([frame(4, 4)])
        with pytest.raises(ContractViolation):
            diff_mask([frame(4, 4), frame(4, 5)])


class TestCropToCommon:
    def test_min_rule(self):
        a, b = crop_to_common(frame(5000, 1920, 1), frame(4800, 1920, 2))
        assert a.shape == b.shape == (4800, 1920, 3)

    def test_equal_sizes_identity(self):
        x = rng_frames(6, 1, 9, 9)[0]
        y = rng_frames(7, 1, 9, 9)[0]
        a, b = crop_to_common(x, y)
        assert np.array_equal(a, x)
        assert np.array_equal(b, y)

    def test_scrollbar_narrowed_width(self):
        a, b = crop_to_common(frame(3000, 1904, 0), frame(3000, 1920, 0))
        assert a.shape == b.shape == (3000, 1904, 3)

    def test_inputs_unmodified_and_top_left_anchored(self):
        x = rng_frames(8, 1, 10, 10)[0]
        y = rng_frames(9, 1, 7, 8)[0]
        x_copy = x.copy()
        a, b = crop_to_common(x, y)
        assert np.array_equal(x, x_copy)
        assert np.array_equal(a, x[:7, :8])
        assert np.array_equal(b, y)

    def test_idempotent_and_swap_symmetric(self):
        x = rng_frames(10, 1, 12, 6)[0]
        y = rng_frames(11, 1, 8, 9)[0]
        a, b = crop_to_common(x, y)
        a2, b2 = crop_to_common(a, b)
        assert np.array_equal(a, a2) and np.array_equal(b, b2)
        b3, a3 = crop_to_common(y, x)
        assert np.array_equal(a, a3) and np.array_equal(b, b3)

    def test_zero_area_rejected(self):
        with pytest.raises(ContractViolation):
            crop_to_common(frame(0, 5), frame(5, 5))


class TestImageIo:
    def test_png_round_trip(self, tmp_path):
        img = rng_frames(12, 1, 21, 13)[0]
        path = tmp_path / "x.png"
        save_png(img, path)
        assert np.array_equal(load_png(path), img)

    def test_content_hash_stable_across_encode_decode(self, tmp_path):
        img = rng_frames(13, 1, 10, 10)[0]
        path = tmp_path / "y.png"
        save_png(img, path)
        assert content_hash(load_png(path)) == content_hash(img)

    def test_content_hash_distinguishes_dimensions(self):
        flat = np.zeros((2, 8, 3), np.uint8)
        tall = np.zeros((8, 2, 3), np.uint8)
        assert content_hash(flat) != content_hash(tall)


class TestOverlayDataclass:
    def test_size_property(self):
        ov = OverlayImage(pixels=frame(7, 9), source_frame_count=1, change_fraction=0.0)
        assert ov.size == (9, 7)
