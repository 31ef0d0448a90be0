"""Synthetic multiband scenes with targets separable in one known band pair.

Background reflectance is drawn i.i.d. per band around a common water-like
mean. All separability is planted in the pair's correlation structure:

* background pixels move both pair bands together by +-contrast (one
  coin flip per pixel), so the pair's normalized difference stays at 0;
* target pixels move the first pair band by +-contrast and the second
  the opposite way (one coin flip per connected target), putting the
  pair's normalized difference at +-contrast/base_mean;
* every other band is drawn identically on target and background.

Each band's marginal distribution and every pair not equal to the planted
one are therefore statistically indistinguishable between target and
background; only the planted pair separates. Scenes round-trip through
the flat-binary raster format, so end-to-end tests need no GeoTIFF
machinery.

One sizing caveat: the 1%-99% percentile stretch clips value populations
smaller than one percent of a patch, so targets should cover more than
about 1.5% of the evaluation patch area (the defaults do).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .raster import AnnotationSet, Scene, WavelengthTable

DEFAULT_BASE_MEAN = 0.25


@dataclass(frozen=True)
class TargetRect:
    row0: int
    col0: int
    height: int
    width: int


@dataclass(frozen=True)
class TargetDisk:
    row: int
    col: int
    radius: float


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_bands: int = 6
    size: tuple[int, int] = (160, 160)  # (rows, cols)
    targets: tuple = (TargetRect(68, 70, 14, 20),)
    separable_pair: tuple[str, str] = ("B3", "B5")
    contrast: float = 0.2
    noise_sigma: float = 0.0
    haze: float | None = None
    base_mean: float = DEFAULT_BASE_MEAN

    def __post_init__(self):
        if self.contrast <= 0:
            raise DataError(f"contrast must be positive, got {self.contrast}")
        if self.noise_sigma < 0:
            raise DataError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        band_ids = synthetic_band_ids(self.n_bands)
        for b in self.separable_pair:
            if b not in band_ids:
                raise DataError(f"separable pair band {b!r} not among {band_ids}")
        if self.separable_pair[0] == self.separable_pair[1]:
            raise DataError("separable pair must use two distinct bands")


def synthetic_band_ids(n_bands: int) -> tuple[str, ...]:
    return tuple(f"B{i + 1}" for i in range(n_bands))


def synthetic_wavelengths(n_bands: int) -> WavelengthTable:
    """Evenly spaced synthetic central wavelengths, 100 nm apart from 400 nm."""
    return WavelengthTable({b: 400.0 + 100.0 * i for i, b in enumerate(synthetic_band_ids(n_bands))})


def _target_mask(spec: SynthSpec) -> np.ndarray:
    rows, cols = spec.size
    mask = np.zeros((rows, cols), dtype=bool)
    for target in spec.targets:
        if isinstance(target, TargetRect):
            r1, c1 = target.row0 + target.height, target.col0 + target.width
            if target.row0 < 0 or target.col0 < 0 or r1 > rows or c1 > cols:
                raise DataError(f"target {target} exceeds the {rows}x{cols} scene")
            mask[target.row0 : r1, target.col0 : c1] = True
        elif isinstance(target, TargetDisk):
            rr, cc = np.ogrid[:rows, :cols]
            mask |= (rr - target.row) ** 2 + (cc - target.col) ** 2 <= target.radius**2
        else:
            raise DataError(f"unknown target shape {type(target).__name__}")
    if not mask.any():
        raise DataError("synthetic spec plants no target pixels")
    return mask


def generate_scene(spec: SynthSpec) -> tuple[Scene, AnnotationSet]:
    """Generate the scene and its exact annotation mask.

    The planted pair's normalized difference sits at 0 on the background
    and at +-contrast/base_mean on targets, a margin guarded by requiring
    contrast > 4 * noise_sigma. Every other band is drawn from the same
    distribution on target and background pixels.
    """
    min_contrast = 4.0 * spec.noise_sigma
    if spec.contrast <= min_contrast:
        raise DataError(
            f"contrast {spec.contrast} too small to guarantee separation margin; "
            f"need contrast > 4 * noise_sigma = {min_contrast}"
        )
    if spec.contrast >= spec.base_mean:
        raise DataError(
            f"contrast {spec.contrast} must stay below base_mean {spec.base_mean} "
            "to keep reflectances positive"
        )
    rows, cols = spec.size
    band_ids = synthetic_band_ids(spec.n_bands)
    rng = np.random.default_rng(spec.seed)
    bands = rng.normal(spec.base_mean, spec.noise_sigma, size=(spec.n_bands, rows, cols))

    mask = _target_mask(spec)
    first = band_ids.index(spec.separable_pair[0])
    second = band_ids.index(spec.separable_pair[1])

    # Background: both pair bands share one +-contrast flip per pixel, so
    # their normalized difference stays 0 and each band's marginal matches
    # what targets will get.
    flips = spec.contrast * rng.choice((-1.0, 1.0), size=(rows, cols))
    bands[first] += flips
    bands[second] += flips

    # Targets: one flip per connected component, anticorrelated across the
    # pair (per-pixel signs would shatter the region-grower's components).
    component_pixels = _components(mask)
    signs = rng.choice((-1.0, 1.0), size=len(component_pixels))
    for sign, pixels in zip(signs, component_pixels):
        rr, cc = pixels[:, 0], pixels[:, 1]
        bands[first][rr, cc] += sign * spec.contrast - flips[rr, cc]
        bands[second][rr, cc] += -sign * spec.contrast - flips[rr, cc]

    if spec.haze is not None:
        ramp = spec.haze * (np.arange(rows, dtype=np.float64) / max(rows - 1, 1))
        bands += ramp[None, :, None]

    scene = Scene(bands=bands.astype(np.float32), band_ids=band_ids)
    annotations = AnnotationSet(
        mask=mask, patch_centers=tuple(_component_centroid(p) for p in component_pixels)
    )
    return scene, annotations


def _components(mask: np.ndarray) -> list[np.ndarray]:
    from scipy import ndimage

    labels, n = ndimage.label(mask, structure=np.ones((3, 3), bool))
    return [np.argwhere(labels == i) for i in range(1, n + 1)]


def _component_centroid(pixels: np.ndarray) -> tuple[int, int]:
    centroid = pixels.mean(axis=0)
    return int(round(centroid[0])), int(round(centroid[1]))
