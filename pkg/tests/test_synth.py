import numpy as np
import pytest

from samselect import (
    DataError,
    Dataset,
    MockSegmenter,
    SearchConfig,
    SynthSpec,
    TargetDisk,
    TargetRect,
    evaluate_viz,
    extract_patches,
    generate_scene,
    load_scene,
    run_search,
    synthetic_wavelengths,
    write_scene,
)
from samselect.segmenter import EmbeddingCache
from samselect.viz import compute_ndi, parse_viz_expr

from conftest import make_patch


def planted_ndi(scene, pair=("B3", "B5")):
    patch = make_patch(scene.bands, scene.band_ids, mask=np.zeros(scene.bands.shape[1:], bool))
    return compute_ndi(patch, *pair).values


class TestGenerateScene:
    def test_same_seed_identical(self):
        a, _ = generate_scene(SynthSpec(seed=42, noise_sigma=0.01))
        b, _ = generate_scene(SynthSpec(seed=42, noise_sigma=0.01))
        np.testing.assert_array_equal(a.bands, b.bands)

    def test_different_seed_differs(self):
        a, _ = generate_scene(SynthSpec(seed=1, noise_sigma=0.01))
        b, _ = generate_scene(SynthSpec(seed=2, noise_sigma=0.01))
        assert not np.array_equal(a.bands, b.bands)

    def test_noiseless_planted_pair_two_valued(self):
        spec = SynthSpec(seed=3, noise_sigma=0.0, contrast=0.2)
        scene, ann = generate_scene(spec)
        ndi = planted_ndi(scene)
        background_values = np.unique(np.round(ndi[~ann.mask], 6))
        target_values = np.unique(np.round(np.abs(ndi[ann.mask]), 6))
        np.testing.assert_allclose(background_values, [0.0], atol=1e-6)
        np.testing.assert_allclose(target_values, [0.2 / 0.25], atol=1e-6)

    def test_annotation_mask_matches_targets(self):
        spec = SynthSpec(seed=4, targets=(TargetRect(30, 40, 14, 20), TargetDisk(100, 100, 9.2)))
        scene, ann = generate_scene(spec)
        expected = np.zeros(spec.size, bool)
        expected[30:44, 40:60] = True
        rr, cc = np.ogrid[: spec.size[0], : spec.size[1]]
        expected |= (rr - 100) ** 2 + (cc - 100) ** 2 <= 9.2**2
        np.testing.assert_array_equal(ann.mask, expected)
        assert len(ann.patch_centers) == 2

    def test_margin_guard_names_minimum(self):
        with pytest.raises(DataError, match="4 \\* noise_sigma = 0.4"):
            generate_scene(SynthSpec(seed=0, contrast=0.2, noise_sigma=0.1))

    def test_contrast_below_base_mean(self):
        with pytest.raises(DataError, match="base_mean"):
            generate_scene(SynthSpec(seed=0, contrast=0.3, base_mean=0.25))

    def test_unknown_pair_band(self):
        with pytest.raises(DataError, match="B9"):
            SynthSpec(seed=0, n_bands=4, separable_pair=("B1", "B9"))

    def test_haze_ramp_added(self):
        base, _ = generate_scene(SynthSpec(seed=5, noise_sigma=0.0))
        hazy, _ = generate_scene(SynthSpec(seed=5, noise_sigma=0.0, haze=0.1))
        delta = hazy.bands[0].astype(np.float64) - base.bands[0].astype(np.float64)
        assert delta[0].mean() == pytest.approx(0.0, abs=1e-6)
        assert delta[-1].mean() == pytest.approx(0.1, abs=1e-6)

    def test_non_planted_pairs_uninformative(self):
        # Mean NDI difference between target and background, averaged over
        # seeds, stays within 3 standard errors of zero for non-planted pairs.
        diffs = {pair: [] for pair in (("B1", "B2"), ("B2", "B4"), ("B3", "B6"), ("B5", "B6"))}
        for seed in range(40):
            scene, ann = generate_scene(SynthSpec(seed=seed, noise_sigma=0.02))
            for pair in diffs:
                ndi = planted_ndi(scene, pair)
                diffs[pair].append(ndi[ann.mask].mean() - ndi[~ann.mask].mean())
        for pair, values in diffs.items():
            values = np.asarray(values)
            stderr = values.std(ddof=1) / np.sqrt(len(values))
            assert abs(values.mean()) <= 3 * max(stderr, 1e-12), pair

    def test_every_band_mean_matched(self):
        # Single-band target/background means agree over the seed ensemble,
        # including the planted pair's bands (their signal lives only in the
        # cross-band correlation).
        diffs = {b: [] for b in ("B1", "B2", "B3", "B4", "B5", "B6")}
        for seed in range(40):
            scene, ann = generate_scene(SynthSpec(seed=seed, noise_sigma=0.02))
            for band_id in diffs:
                band = scene.band(band_id).astype(np.float64)
                diffs[band_id].append(band[ann.mask].mean() - band[~ann.mask].mean())
        for band_id, values in diffs.items():
            values = np.asarray(values)
            stderr = values.std(ddof=1) / np.sqrt(len(values))
            assert abs(values.mean()) <= 3 * max(stderr, 1e-12), band_id

    def test_flat_binary_round_trip(self, tmp_path):
        spec = SynthSpec(seed=6, noise_sigma=0.01)
        scene, _ = generate_scene(spec)
        wl = synthetic_wavelengths(spec.n_bands)
        path = tmp_path / "synth.bin"
        write_scene(scene, path, wl)
        again = load_scene(path)
        np.testing.assert_array_equal(again.bands, scene.bands)
        assert again.band_ids == scene.band_ids


class TestSynthOracle:
    def test_noiseless_mock_iou_is_exactly_one(self):
        spec = SynthSpec(seed=7, noise_sigma=0.0)
        scene, ann = generate_scene(spec)
        wl = synthetic_wavelengths(spec.n_bands)
        dataset = Dataset(tuple(extract_patches(scene, ann, 128)), "synth", wl)
        record = evaluate_viz(
            parse_viz_expr("NDI(B3,B5)", wl),
            dataset,
            MockSegmenter(),
            SearchConfig(selector="centroid"),
            EmbeddingCache(),
        )
        assert record.per_patch_iou[0][1] == 1.0

    def test_full_ndi_search_recovers_planted_pair(self):
        spec = SynthSpec(seed=8, noise_sigma=0.02)
        scene, ann = generate_scene(spec)
        wl = synthetic_wavelengths(spec.n_bands)
        dataset = Dataset(tuple(extract_patches(scene, ann, 128)), "synth", wl)
        report = run_search(
            dataset, MockSegmenter(), {"NDI"}, SearchConfig(selector="centroid", seed=8)
        )
        assert report.argmax.viz_expr == "NDI(B3,B5)"
