import logging

import numpy as np
import pytest

from samselect import (
    DataError,
    KMeansConfig,
    PromptSet,
    add_background_prompts,
    prompts_centroid,
    prompts_kmeans,
    prompts_manual,
    prompts_skeleton,
    skeletonize,
)
from samselect.prompts import BACKGROUND, FOREGROUND
from samselect.viz import RenderedVisualization, NormalizedDifference

from conftest import make_patch


def rendered_for(patch, rgb=None):
    if rgb is None:
        rng = np.random.default_rng(0)
        rgb = rng.uniform(0, 1, size=(patch.size, patch.size, 3))
    return RenderedVisualization(rgb=rgb, spec=NormalizedDifference("B2", "B3"), patch_id=patch.id)


def patch_with_mask(mask):
    size = mask.shape[0]
    bands = np.random.default_rng(1).uniform(0, 1, (3, size, size)).astype(np.float32)
    return make_patch(bands, ("B2", "B3", "B4"), mask.astype(bool))


class TestPromptSet:
    def test_requires_foreground(self):
        with pytest.raises(DataError, match="foreground"):
            PromptSet(points=((1, 1, BACKGROUND),), selector="manual")

    def test_partition(self):
        ps = PromptSet(points=((1, 2, FOREGROUND), (3, 4, BACKGROUND)), selector="manual")
        assert ps.foreground() == [(1, 2)]
        assert ps.background() == [(3, 4)]


class TestManual:
    def test_single_point_on_mask(self):
        mask = np.zeros((16, 16), bool)
        mask[5, 6] = True
        patch = patch_with_mask(mask)
        ps = prompts_manual([(5, 6, FOREGROUND)], patch)
        assert ps.points == ((5, 6, FOREGROUND),)
        assert ps.selector == "manual"

    def test_out_of_bounds(self):
        patch = patch_with_mask(np.ones((16, 16), bool))
        with pytest.raises(DataError, match="outside"):
            prompts_manual([(200, 5, FOREGROUND)], patch)

    def test_off_mask_foreground_kept_with_warning(self, caplog):
        mask = np.zeros((16, 16), bool)
        mask[5, 6] = True
        patch = patch_with_mask(mask)
        with caplog.at_level(logging.WARNING, logger="samselect.prompts"):
            ps = prompts_manual([(5, 6, FOREGROUND), (0, 0, FOREGROUND)], patch)
        assert len(ps.points) == 2
        assert any("off-mask" in record.message for record in caplog.records)

    def test_unknown_label(self):
        patch = patch_with_mask(np.ones((8, 8), bool))
        with pytest.raises(DataError, match="label"):
            prompts_manual([(1, 1, "maybe")], patch)


class TestCentroid:
    def test_symmetric_square_center(self):
        mask = np.zeros((32, 32), bool)
        mask[10:15, 20:25] = True  # 5x5, center (12, 22)
        ps = prompts_centroid(patch_with_mask(mask))
        assert ps.points == ((12, 22, FOREGROUND),)

    def test_c_shape_snaps_to_component(self):
        mask = np.zeros((32, 32), bool)
        mask[5:17, 5:9] = True    # left bar
        mask[5:9, 9:17] = True    # top bar
        mask[13:17, 9:17] = True  # bottom bar -> C opening to the right
        center_of_mass = np.argwhere(mask).mean(axis=0)
        assert not mask[int(round(center_of_mass[0])), int(round(center_of_mass[1]))]
        (point,) = prompts_centroid(patch_with_mask(mask)).points
        assert mask[point[0], point[1]]

    def test_two_components_two_prompts(self):
        mask = np.zeros((32, 32), bool)
        mask[2:8, 2:7] = True    # 30 px
        mask[20:26, 20:25] = True
        ps = prompts_centroid(patch_with_mask(mask))
        assert len(ps.points) == 2
        for r, c, label in ps.points:
            assert label == FOREGROUND and mask[r, c]

    def test_all_components_too_small(self):
        mask = np.zeros((32, 32), bool)
        mask[3:6, 3:6] = True  # 9 px <= 10
        with pytest.raises(DataError, match="exceeds"):
            prompts_centroid(patch_with_mask(mask))

    def test_empty_mask(self):
        with pytest.raises(DataError, match="empty"):
            prompts_centroid(patch_with_mask(np.zeros((16, 16), bool)))


def reference_zhang_suen(mask):
    """Literal per-pixel transcription of the two-subiteration thinning pass."""
    img = mask.astype(np.uint8).copy()

    def neighbors(y, x):
        p = np.pad(img, 1)
        y, x = y + 1, x + 1
        return [p[y - 1, x], p[y - 1, x + 1], p[y, x + 1], p[y + 1, x + 1],
                p[y + 1, x], p[y + 1, x - 1], p[y, x - 1], p[y - 1, x - 1]]

    changed = True
    while changed:
        changed = False
        for step in (0, 1):
            to_delete = []
            for y in range(img.shape[0]):
                for x in range(img.shape[1]):
                    if not img[y, x]:
                        continue
                    n = neighbors(y, x)
                    p2, p3, p4, p5, p6, p7, p8, p9 = n
                    count = sum(n)
                    ring = n + [n[0]]
                    transitions = sum(ring[i] == 0 and ring[i + 1] == 1 for i in range(8))
                    if not (2 <= count <= 6 and transitions == 1):
                        continue
                    if step == 0:
                        if p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0:
                            to_delete.append((y, x))
                    else:
                        if p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0:
                            to_delete.append((y, x))
            for y, x in to_delete:
                img[y, x] = 0
                changed = True
    return img.astype(bool)


def count_components(mask):
    from scipy import ndimage

    return ndimage.label(mask, structure=np.ones((3, 3), bool))[1]


class TestSkeletonize:
    def test_thin_line_unchanged(self):
        mask = np.zeros((16, 16), bool)
        mask[8, 2:14] = True
        np.testing.assert_array_equal(skeletonize(mask), mask)

    def test_empty_mask(self):
        mask = np.zeros((8, 8), bool)
        np.testing.assert_array_equal(skeletonize(mask), mask)

    def test_filled_square_reduces_to_center_core(self):
        mask = np.zeros((16, 16), bool)
        mask[4:11, 4:11] = True  # 7x7 filled square, center (7, 7)
        skel = skeletonize(mask)
        np.testing.assert_array_equal(skel, reference_zhang_suen(mask))
        assert skel.sum() <= 7
        assert skel[7, 7]

    def test_matches_reference_on_random_masks(self):
        rng = np.random.default_rng(21)
        for _ in range(12):
            mask = rng.random((14, 14)) < 0.55
            np.testing.assert_array_equal(skeletonize(mask), reference_zhang_suen(mask))

    def test_subset_of_input(self):
        rng = np.random.default_rng(22)
        for _ in range(10):
            mask = rng.random((20, 20)) < 0.6
            skel = skeletonize(mask)
            assert not (skel & ~mask).any()

    def test_idempotent(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            mask = rng.random((20, 20)) < 0.6
            skel = skeletonize(mask)
            np.testing.assert_array_equal(skeletonize(skel), skel)

    def test_preserves_component_count(self):
        # Scoped to components above the prompt selector's 10 px threshold:
        # the textbook algorithm deletes an isolated 2x2 block entirely.
        rng = np.random.default_rng(24)
        for _ in range(10):
            mask = np.zeros((36, 36), bool)
            for slot_r in (2, 20):
                for slot_c in (2, 20):
                    h, w = rng.integers(3, 8), rng.integers(4, 8)
                    mask[slot_r : slot_r + h, slot_c : slot_c + w] = True
            assert count_components(skeletonize(mask)) == count_components(mask)

    def test_never_splits_a_component(self):
        rng = np.random.default_rng(30)
        for _ in range(10):
            mask = np.zeros((20, 20), bool)
            r, c = rng.integers(2, 8, 2)
            h, w = rng.integers(4, 10, 2)
            mask[r : r + h, c : c + w] = True
            mask[r + h - 1 : r + h + 3, c : c + 2] = True  # appendage
            assert count_components(mask) == 1
            assert count_components(skeletonize(mask)) == 1


class TestSkeletonPrompts:
    def test_prompt_on_straight_line(self):
        mask = np.zeros((32, 32), bool)
        mask[10, 4:24] = True  # 20 px line
        ps = prompts_skeleton(patch_with_mask(mask), seed=3)
        (point,) = ps.points
        assert mask[point[0], point[1]]
        assert point[0] == 10

    def test_same_seed_identical(self):
        rng = np.random.default_rng(25)
        mask = np.zeros((32, 32), bool)
        mask[5:20, 5:12] = True
        patch = patch_with_mask(mask)
        assert prompts_skeleton(patch, seed=9) == prompts_skeleton(patch, seed=9)

    def test_small_blob_uses_centroid(self):
        mask = np.zeros((32, 32), bool)
        mask[4:8, 4:6] = True  # 8 px <= min_size
        ps = prompts_skeleton(patch_with_mask(mask), seed=0)
        assert ps.points == ((5, 4, FOREGROUND),) or ps.points == ((6, 5, FOREGROUND),) or len(ps.points) == 1
        # the centroid of rows 4..7 x cols 4..5 rounds to (6, 5)
        assert ps.points[0][:2] == (6, 5)

    def test_prompts_inside_mask(self):
        rng = np.random.default_rng(26)
        mask = np.zeros((32, 32), bool)
        mask[8:24, 10:20] = True
        for seed in range(5):
            for r, c, _ in prompts_skeleton(patch_with_mask(mask), seed=seed).points:
                assert mask[r, c]


class TestKMeansPrompts:
    def test_few_pixels_all_become_prompts(self):
        mask = np.zeros((16, 16), bool)
        mask[3, 3] = mask[3, 4] = mask[9, 9] = mask[12, 2] = True
        patch = patch_with_mask(mask)
        ps = prompts_kmeans(patch, rendered_for(patch), KMeansConfig(k=10, seed=0))
        assert len(ps.points) == 4
        assert {p[:2] for p in ps.points} == {(3, 3), (3, 4), (9, 9), (12, 2)}

    def test_two_spectral_blobs_one_prompt_each(self):
        mask = np.zeros((32, 32), bool)
        mask[2:10, 2:10] = True
        mask[20:28, 20:28] = True
        patch = patch_with_mask(mask)
        rgb = np.zeros((32, 32, 3))
        rgb[2:10, 2:10] = (0.9, 0.1, 0.1)
        rgb[20:28, 20:28] = (0.1, 0.1, 0.9)
        ps = prompts_kmeans(patch, rendered_for(patch, rgb), KMeansConfig(k=2, seed=5))
        assert len(ps.points) == 2
        regions = {(r < 16) for r, c, _ in ps.points}
        assert regions == {True, False}  # one prompt per blob
        # brute-force check: each prompt is the pixel nearest its cluster mean
        for r, c, _ in ps.points:
            assert mask[r, c]

    def test_same_seed_identical(self):
        mask = np.zeros((16, 16), bool)
        mask[2:12, 3:13] = True
        patch = patch_with_mask(mask)
        rendered = rendered_for(patch)
        cfg = KMeansConfig(k=4, seed=11)
        assert prompts_kmeans(patch, rendered, cfg) == prompts_kmeans(patch, rendered, cfg)

    def test_between_one_and_k_prompts(self):
        rng = np.random.default_rng(27)
        for k in (1, 3, 10):
            mask = rng.random((16, 16)) < 0.5
            if not mask.any():
                continue
            patch = patch_with_mask(mask)
            ps = prompts_kmeans(patch, rendered_for(patch), KMeansConfig(k=k, seed=1))
            assert 1 <= len(ps.points) <= max(k, mask.sum())
            if mask.sum() > k:
                assert len(ps.points) <= k

    def test_membership(self):
        rng = np.random.default_rng(28)
        mask = rng.random((16, 16)) < 0.4
        patch = patch_with_mask(mask)
        ps = prompts_kmeans(patch, rendered_for(patch), KMeansConfig(k=5, seed=2))
        for r, c, label in ps.points:
            assert label == FOREGROUND and mask[r, c]

    def test_empty_mask(self):
        patch = patch_with_mask(np.zeros((8, 8), bool))
        with pytest.raises(DataError, match="empty"):
            prompts_kmeans(patch, rendered_for(patch), KMeansConfig())


class TestBackgroundPrompts:
    def test_all_foreground_patch_unchanged(self, caplog):
        patch = patch_with_mask(np.ones((8, 8), bool))
        fg = prompts_manual([(2, 2, FOREGROUND)], patch)
        with caplog.at_level(logging.WARNING, logger="samselect.prompts"):
            out = add_background_prompts(patch, fg, rendered_for(patch), KMeansConfig(seed=0))
        assert out == fg
        assert any("no background" in r.message for r in caplog.records)

    def test_three_foreground_three_background(self):
        mask = np.zeros((32, 32), bool)
        mask[4:10, 4:10] = mask[20:26, 4:10] = mask[12:18, 20:26] = True
        patch = patch_with_mask(mask)
        fg = prompts_centroid(patch)
        assert len(fg.points) == 3
        out = add_background_prompts(patch, fg, rendered_for(patch), KMeansConfig(seed=1))
        assert len(out.background()) == 3
        assert len(out.foreground()) == 3

    def test_background_prompts_off_mask(self):
        mask = np.zeros((16, 16), bool)
        mask[2:12, 2:12] = True
        patch = patch_with_mask(mask)
        fg = prompts_centroid(patch)
        out = add_background_prompts(patch, fg, rendered_for(patch), KMeansConfig(seed=2))
        for r, c in out.background():
            assert not mask[r, c]

    def test_cap_at_ten(self):
        mask = np.zeros((32, 32), bool)
        mask[2:30, 2:20] = True
        patch = patch_with_mask(mask)
        many = prompts_manual([(3 + i, 3 + i, FOREGROUND) for i in range(14)], patch)
        out = add_background_prompts(patch, many, rendered_for(patch), KMeansConfig(seed=3))
        assert len(out.background()) <= 10
