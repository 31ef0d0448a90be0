"""Point-prompt generation from annotation masks.

Four selectors: manual ingestion, per-component centroids, random samples
from Zhang-Suen skeletons, and k-means over the rendered 3-channel values
of the annotated pixels. Background (negative) prompts are produced by
k-means over the complement mask. All selectors are deterministic given
(patch, rendered, seed); random streams are derived per call from
(seed, patch_id, selector) and never shared.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError
from .raster import Patch
from .viz import RenderedVisualization

logger = logging.getLogger(__name__)

FOREGROUND = "foreground"
BACKGROUND = "background"

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class PromptSet:
    """Labeled point prompts: (row, col, label) with at least one foreground point."""

    points: tuple[tuple[int, int, str], ...]
    selector: str
    seed: int = 0

    def __post_init__(self):
        if not any(label == FOREGROUND for _, _, label in self.points):
            raise DataError("a prompt set needs at least one foreground point")

    def foreground(self) -> list[tuple[int, int]]:
        return [(r, c) for r, c, label in self.points if label == FOREGROUND]

    def background(self) -> list[tuple[int, int]]:
        return [(r, c) for r, c, label in self.points if label == BACKGROUND]


@dataclass(frozen=True)
class KMeansConfig:
    k: int = 10
    max_iter: int = 100
    seed: int = 0
    feature_source: str = "rendered_rgb"

    def __post_init__(self):
        if self.k < 1:
            raise DataError(f"k must be >= 1, got {self.k}")
        if self.feature_source != "rendered_rgb":
            raise DataError(f"unsupported feature source {self.feature_source!r}")


def _rng(seed: int, patch_id: str, selector: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}|{patch_id}|{selector}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _components(mask: np.ndarray) -> list[np.ndarray]:
    """Per-component (n_i, 2) pixel coordinate arrays, in raster-scan label order."""
    labels, n = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    return [np.argwhere(labels == i) for i in range(1, n + 1)]


def _component_centroid(pixels: np.ndarray) -> tuple[int, int]:
    """Rounded pixel centroid, snapped to the nearest component pixel when off-mask."""
    centroid = pixels.mean(axis=0)
    rounded = np.floor(centroid + 0.5).astype(int)
    if (pixels == rounded).all(axis=1).any():
        return int(rounded[0]), int(rounded[1])
    # np.argmin takes the first minimum; pixels are in row-major order, so
    # ties resolve to the smallest (row, col).
    nearest = pixels[np.argmin(((pixels - centroid) ** 2).sum(axis=1))]
    return int(nearest[0]), int(nearest[1])


def prompts_manual(points, patch: Patch) -> PromptSet:
    """Ingest user-provided (row, col, label) prompts, validating against the mask.

    Label/mask mismatches are reported as warnings but kept: hand-placed
    points may legitimately disagree with polygon rasterization by a pixel.
    """
    validated = []
    for row, col, label in points:
        if not (0 <= row < patch.size and 0 <= col < patch.size):
            raise DataError(
                f"manual prompt ({row}, {col}) outside {patch.size}x{patch.size} patch {patch.id}"
            )
        if label not in (FOREGROUND, BACKGROUND):
            raise DataError(f"unknown prompt label {label!r}")
        on_mask = bool(patch.mask[row, col])
        if label == FOREGROUND and not on_mask:
            logger.warning(
                "patch %s: foreground prompt (%d, %d) is off-mask; keeping it", patch.id, row, col
            )
        elif label == BACKGROUND and on_mask:
            logger.warning(
                "patch %s: background prompt (%d, %d) is on-mask; keeping it", patch.id, row, col
            )
        validated.append((int(row), int(col), label))
    return PromptSet(points=tuple(validated), selector="manual")


def prompts_centroid(patch: Patch, min_size: int = 10) -> PromptSet:
    """One centroid prompt per connected component larger than min_size pixels."""
    if not patch.mask.any():
        raise DataError(f"patch {patch.id} has an empty mask")
    points = []
    for pixels in _components(patch.mask):
        if len(pixels) > min_size:
            row, col = _component_centroid(pixels)
            points.append((row, col, FOREGROUND))
    if not points:
        raise DataError(
            f"patch {patch.id}: no component exceeds {min_size} pixels; no centroid prompts"
        )
    return PromptSet(points=tuple(points), selector="centroid")


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen iterative thinning to a single-pixel-wide skeleton.

    Runs the two deletion subiterations until a fixpoint. The skeleton is a
    subset of the input and preserves the 8-connectivity of each component.
    """
    img = np.asarray(mask, dtype=bool)
    if img.ndim != 2:
        raise DataError("skeletonize expects a 2-D mask")
    img = img.copy()

    def neighbors(padded):
        # Clockwise from north: P2..P9 for every interior pixel.
        return (
            padded[:-2, 1:-1],   # P2 N
            padded[:-2, 2:],     # P3 NE
            padded[1:-1, 2:],    # P4 E
            padded[2:, 2:],      # P5 SE
            padded[2:, 1:-1],    # P6 S
            padded[2:, :-2],     # P7 SW
            padded[1:-1, :-2],   # P8 W
            padded[:-2, :-2],    # P9 NW
        )

    while True:
        changed = False
        for step in (0, 1):
            padded = np.pad(img, 1, constant_values=False)
            p2, p3, p4, p5, p6, p7, p8, p9 = neighbors(padded)
            ring = [p2, p3, p4, p5, p6, p7, p8, p9, p2]
            count = sum(n.astype(np.uint8) for n in ring[:-1])
            transitions = sum(
                (~ring[i] & ring[i + 1]).astype(np.uint8) for i in range(8)
            )
            if step == 0:
                cond_a = ~(p2 & p4 & p6)
                cond_b = ~(p4 & p6 & p8)
            else:
                cond_a = ~(p2 & p4 & p8)
                cond_b = ~(p2 & p6 & p8)
            delete = (
                img
                & (count >= 2)
                & (count <= 6)
                & (transitions == 1)
                & cond_a
                & cond_b
            )
            if delete.any():
                img[delete] = False
                changed = True
        if not changed:
            return img


def prompts_skeleton(patch: Patch, min_size: int = 10, seed: int = 0) -> PromptSet:
    """One prompt per component: a random skeleton pixel for large components,
    the centroid for components at or below min_size pixels."""
    if not patch.mask.any():
        raise DataError(f"patch {patch.id} has an empty mask")
    rng = _rng(seed, patch.id, "skeleton")
    points = []
    for pixels in _components(patch.mask):
        if len(pixels) > min_size:
            component = np.zeros_like(patch.mask)
            component[pixels[:, 0], pixels[:, 1]] = True
            skeleton_pixels = np.argwhere(skeletonize(component))
            if len(skeleton_pixels) == 0:  # cannot happen for nonempty masks; be safe
                row, col = _component_centroid(pixels)
            else:
                row, col = skeleton_pixels[rng.integers(len(skeleton_pixels))]
        else:
            row, col = _component_centroid(pixels)
        points.append((int(row), int(col), FOREGROUND))
    return PromptSet(points=tuple(points), selector="skeleton", seed=seed)


def _pairwise_sq_dists(features: np.ndarray, centroids: np.ndarray, feat_sq: np.ndarray):
    # ||x - c||^2 expanded so the cross term runs through BLAS; clamp the
    # tiny negatives the expansion can produce.
    cross = features @ centroids.T
    cent_sq = (centroids**2).sum(axis=1)
    return np.maximum(feat_sq[:, None] - 2.0 * cross + cent_sq[None, :], 0.0)


def _kmeans(features: np.ndarray, k: int, max_iter: int, rng: np.random.Generator):
    """Seeded k-means++ initialization plus Lloyd iterations.

    Returns (assignments, centroids). Empty clusters keep their previous
    centroid and simply end up unused.
    """
    n = len(features)
    features = np.ascontiguousarray(features, dtype=np.float64)
    feat_sq = (features**2).sum(axis=1)
    centroids = np.empty((k, features.shape[1]))
    centroids[0] = features[rng.integers(n)]
    d2 = ((features - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i:] = centroids[0]
            break
        probs = d2 / total
        centroids[i] = features[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((features - centroids[i]) ** 2).sum(axis=1))

    assignments = np.full(n, -1)
    for _ in range(max_iter):
        dists = _pairwise_sq_dists(features, centroids, feat_sq)
        new_assignments = np.argmin(dists, axis=1)
        if (new_assignments == assignments).all():
            break
        assignments = new_assignments
        counts = np.bincount(assignments, minlength=k).astype(np.float64)
        occupied = counts > 0
        sums = np.empty((k, features.shape[1]))
        for d in range(features.shape[1]):
            sums[:, d] = np.bincount(assignments, weights=features[:, d], minlength=k)
        centroids[occupied] = sums[occupied] / counts[occupied, None]
    return assignments, centroids


def _kmeans_points(
    pixels: np.ndarray, features: np.ndarray, k: int, max_iter: int, rng: np.random.Generator
) -> list[tuple[int, int]]:
    """Representative pixels: per non-empty cluster, the member nearest its centroid."""
    if len(pixels) <= k:
        return [(int(r), int(c)) for r, c in pixels]
    assignments, centroids = _kmeans(features, k, max_iter, rng)
    points = []
    for i in range(k):
        member_idx = np.flatnonzero(assignments == i)
        if len(member_idx) == 0:
            continue
        d2 = ((features[member_idx] - centroids[i]) ** 2).sum(axis=1)
        best = member_idx[np.argmin(d2)]  # first minimum = smallest (row, col)
        points.append((int(pixels[best, 0]), int(pixels[best, 1])))
    return points


def prompts_kmeans(patch: Patch, rendered: RenderedVisualization, cfg: KMeansConfig) -> PromptSet:
    """Cluster the rendered 3-channel values of mask pixels; prompt each cluster.

    With at most k mask pixels every pixel becomes a prompt. Otherwise the
    pixel whose feature vector lies nearest each non-empty cluster centroid
    is selected (ties break to the smallest row, then column).
    """
    if not patch.mask.any():
        raise DataError(f"patch {patch.id} has an empty mask")
    pixels = np.argwhere(patch.mask)
    features = rendered.rgb[patch.mask]
    rng = _rng(cfg.seed, patch.id, "kmeans")
    points = _kmeans_points(pixels, features, cfg.k, cfg.max_iter, rng)
    return PromptSet(
        points=tuple((r, c, FOREGROUND) for r, c in points),
        selector="kmeans",
        seed=cfg.seed,
    )


def add_background_prompts(
    patch: Patch, fg: PromptSet, rendered: RenderedVisualization, cfg: KMeansConfig
) -> PromptSet:
    """Append negative prompts chosen by k-means over the background pixels.

    The cluster count pairs with the number of foreground prompts, capped
    at 10. An all-foreground patch is returned unchanged with a diagnostic.
    """
    bg_mask = ~patch.mask
    if not bg_mask.any():
        logger.warning("patch %s has no background pixels; skipping negative prompts", patch.id)
        return fg
    k = min(len(fg.foreground()), 10)
    pixels = np.argwhere(bg_mask)
    features = rendered.rgb[bg_mask]
    rng = _rng(cfg.seed, patch.id, "background")
    points = _kmeans_points(pixels, features, k, cfg.max_iter, rng)
    appended = tuple((r, c, BACKGROUND) for r, c in points)
    return PromptSet(points=fg.points + appended, selector=fg.selector, seed=fg.seed)
