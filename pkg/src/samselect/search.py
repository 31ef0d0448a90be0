"""Exhaustive visualization search: render, prompt, segment, score, rank.

Stage 1 evaluates band composites and single indices; stage 2 builds
spectral index composites from the top-10 NDI and top-10 SSI of stage 1
and evaluates all their triples. Records rank by mean IoU over the
dataset's patches (ties break lexicographically on the canonical
expression), so the report is independent of evaluation order and worker
count.
"""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import BackendError, ConfigError, DataError
from .prompts import (
    KMeansConfig,
    PromptSet,
    add_background_prompts,
    prompts_centroid,
    prompts_kmeans,
    prompts_manual,
    prompts_skeleton,
)
from .raster import Patch, WavelengthTable
from .segmenter import EmbeddingCache, SegmenterBackend, predict
from .viz import (
    IndexSpec,
    PcaComposite,
    RenderedVisualization,
    VisualizationSpec,
    channel_source_key,
    channel_sources,
    enumerate_search_space,
    format_viz_expr,
    normalize_percentile,
    parse_viz_expr,
    pca_score_images,
    render,
    source_grid,
)

MODES = ("BC", "NDI", "SSI", "SIC")
SELECTORS = ("manual", "centroid", "skeleton", "kmeans")


@dataclass(frozen=True)
class Dataset:
    """The annotated patches of one site plus the band wavelength table."""

    patches: tuple[Patch, ...]
    site_name: str
    wavelengths: WavelengthTable

    def __post_init__(self):
        if not self.patches:
            raise DataError("dataset has no patches")
        ids = [p.id for p in self.patches]
        if len(set(ids)) != len(ids):
            raise DataError("patch ids must be unique")

    @property
    def band_ids(self) -> tuple[str, ...]:
        return self.patches[0].band_ids


@dataclass(frozen=True)
class ScoreRecord:
    viz_expr: str
    per_patch_iou: tuple[tuple[str, float], ...]
    mean_iou: float
    wall_time_ms: float
    global_iou: float | None = None


@dataclass(frozen=True)
class SearchReport:
    config: dict
    site: str
    ranked: tuple[ScoreRecord, ...]
    stage1_top: tuple[str, ...]
    n_visualizations: int
    total_runtime_ms: float

    @property
    def argmax(self) -> ScoreRecord:
        return self.ranked[0]

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "site": self.site,
            "records": [
                {
                    "viz": r.viz_expr,
                    "mean_iou": r.mean_iou,
                    "per_patch": [{"patch": pid, "iou": v} for pid, v in r.per_patch_iou],
                    "wall_ms": r.wall_time_ms,
                }
                for r in self.ranked
            ],
            "stage1_top": list(self.stage1_top),
            "argmax": {"viz": self.argmax.viz_expr, "mean_iou": self.argmax.mean_iou},
            "totals": {
                "n_visualizations": self.n_visualizations,
                "total_runtime": self.total_runtime_ms / 1000.0,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def write_csv(self, path: str | Path) -> None:
        import csv

        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["viz", "mean_iou", "rank"])
            for rank, record in enumerate(self.ranked, start=1):
                writer.writerow([record.viz_expr, f"{record.mean_iou:.6f}", rank])


@dataclass
class SearchConfig:
    """Knobs of one search run; the report embeds a snapshot of these.

    ``tau`` parameterizes the mock backend and is applied when the backend
    is constructed (the CLI wires it); it lives here so the report snapshot
    captures the full run configuration.
    """

    selector: str = "kmeans"
    seed: int = 0
    negatives: bool = False
    tau: float = 0.1
    k: int = 10
    kmeans_max_iter: int = 100
    workers: int = 1
    joint_decode: bool = False
    aggregate: str = "mean_patch"  # or "global_pixel"
    normalization: str = "patch"  # or "dataset"
    p_low: float = 1.0
    p_high: float = 99.0
    include_pca: bool = False
    manual_prompts: dict = field(default_factory=dict)  # patch_id -> [(row, col, label)]

    def __post_init__(self):
        if self.selector not in SELECTORS:
            raise ConfigError(f"unknown prompt selector {self.selector!r}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.aggregate not in ("mean_patch", "global_pixel"):
            raise ConfigError(f"unknown aggregate mode {self.aggregate!r}")
        if self.normalization not in ("patch", "dataset"):
            raise ConfigError(f"unknown normalization scope {self.normalization!r}")

    def snapshot(self) -> dict:
        snap = asdict(self)
        snap["manual_prompts"] = {
            pid: [list(p) for p in pts] for pid, pts in self.manual_prompts.items()
        }
        return snap


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks.

    Two empty masks agree perfectly (1.0); exactly one empty mask scores 0.
    """
    if pred.shape != gt.shape:
        raise DataError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


class ChannelCache:
    """Memoized normalized channel grids, shared across one search run.

    Composites reuse each band/index channel across hundreds of specs, so
    caching the normalized grids keyed by (patch, source) removes the bulk
    of the render cost without changing any value: entries are pure
    functions of the patch. Also owns dataset-scope stretch bounds when
    that normalization mode is active.
    """

    def __init__(self, dataset: Dataset, cfg: SearchConfig):
        self._dataset = dataset
        self._cfg = cfg
        self._grids: dict = {}
        self._bounds: dict = {}
        self._mask_prompts: dict = {}
        self._lock = threading.Lock()

    def mask_prompts(self, patch: Patch, build) -> PromptSet:
        """Memoize selectors that depend only on the mask (not the rendering)."""
        with self._lock:
            if patch.id in self._mask_prompts:
                return self._mask_prompts[patch.id]
        prompt_set = build()
        with self._lock:
            return self._mask_prompts.setdefault(patch.id, prompt_set)

    def _dataset_bounds(self, source) -> tuple[float, float]:
        key = channel_source_key(source)
        with self._lock:
            if key in self._bounds:
                return self._bounds[key]
        pooled = np.concatenate(
            [source_grid(p, source, self._dataset.wavelengths).ravel() for p in self._dataset.patches]
        )
        lo, hi = np.percentile(pooled, [self._cfg.p_low, self._cfg.p_high])
        with self._lock:
            return self._bounds.setdefault(key, (float(lo), float(hi)))

    def _channel(self, patch: Patch, source) -> np.ndarray:
        key = (patch.id, channel_source_key(source))
        with self._lock:
            grid = self._grids.get(key)
        if grid is not None:
            return grid
        bounds = self._dataset_bounds(source) if self._cfg.normalization == "dataset" else None
        grid = normalize_percentile(
            source_grid(patch, source, self._dataset.wavelengths),
            self._cfg.p_low,
            self._cfg.p_high,
            bounds=bounds,
        )
        with self._lock:
            return self._grids.setdefault(key, grid)

    def rendered(self, patch: Patch, spec: VisualizationSpec) -> RenderedVisualization:
        if isinstance(spec, PcaComposite):
            return render(patch, spec, self._dataset.wavelengths, self._cfg.p_low, self._cfg.p_high)
        channels = [self._channel(patch, src) for src in channel_sources(spec)]
        if len(channels) == 1:
            channels = channels * 3
        return RenderedVisualization(rgb=np.stack(channels, axis=-1), spec=spec, patch_id=patch.id)


def _select_prompts(
    patch: Patch,
    rendered: RenderedVisualization,
    cfg: SearchConfig,
    caches: ChannelCache | None = None,
) -> PromptSet:
    kcfg = KMeansConfig(k=cfg.k, max_iter=cfg.kmeans_max_iter, seed=cfg.seed)

    def build_mask_only() -> PromptSet:
        if cfg.selector == "manual":
            if patch.id not in cfg.manual_prompts:
                raise DataError(f"no manual prompts supplied for patch {patch.id}")
            return prompts_manual(cfg.manual_prompts[patch.id], patch)
        if cfg.selector == "centroid":
            return prompts_centroid(patch)
        return prompts_skeleton(patch, seed=cfg.seed)

    if cfg.selector == "kmeans":
        prompt_set = prompts_kmeans(patch, rendered, kcfg)
    elif caches is not None:
        prompt_set = caches.mask_prompts(patch, build_mask_only)
    else:
        prompt_set = build_mask_only()
    if cfg.negatives:
        # Background features come from the rendering, so negatives are
        # re-derived per visualization even for mask-only selectors.
        prompt_set = add_background_prompts(patch, prompt_set, rendered, kcfg)
    return prompt_set


def evaluate_viz(
    spec: VisualizationSpec,
    dataset: Dataset,
    backend: SegmenterBackend,
    cfg: SearchConfig,
    cache: EmbeddingCache,
    channel_cache: ChannelCache | None = None,
) -> ScoreRecord:
    """Score one visualization: per-patch render, prompt, predict, IoU.

    K-means prompts are recomputed per visualization (their features
    depend on the rendering); mask-only selectors are deterministic in the
    patch alone and yield identical prompts for every visualization.
    """
    channel_cache = channel_cache or ChannelCache(dataset, cfg)
    expr = format_viz_expr(spec)
    t0 = time.perf_counter()
    per_patch = []
    intersection_total = 0
    union_total = 0
    for patch in dataset.patches:
        try:
            rendered = channel_cache.rendered(patch, spec)
            prompt_set = _select_prompts(patch, rendered, cfg, channel_cache)
            emb = cache.get_or_compute(backend, rendered)
            result = predict(backend, emb, prompt_set, joint_decode=cfg.joint_decode)
        except BackendError as e:
            raise BackendError(f"{expr} failed on patch {patch.id}: {e}") from e
        per_patch.append((patch.id, iou(result.mask, patch.mask)))
        if cfg.aggregate == "global_pixel":
            intersection_total += np.count_nonzero(result.mask & patch.mask)
            union_total += np.count_nonzero(result.mask | patch.mask)
    wall_ms = (time.perf_counter() - t0) * 1000.0
    mean_iou = sum(v for _, v in per_patch) / len(per_patch)
    global_iou = None
    if cfg.aggregate == "global_pixel":
        global_iou = 1.0 if union_total == 0 else intersection_total / union_total
    return ScoreRecord(
        viz_expr=expr,
        per_patch_iou=tuple(per_patch),
        mean_iou=mean_iou,
        wall_time_ms=wall_ms,
        global_iou=global_iou,
    )


def _rank_key(record: ScoreRecord, cfg: SearchConfig):
    metric = record.global_iou if cfg.aggregate == "global_pixel" else record.mean_iou
    return (-metric, record.viz_expr)


def _evaluate_all(specs, dataset, backend, cfg, cache, channel_cache) -> list[ScoreRecord]:
    if cfg.workers == 1:
        return [evaluate_viz(s, dataset, backend, cfg, cache, channel_cache) for s in specs]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(
            pool.map(lambda s: evaluate_viz(s, dataset, backend, cfg, cache, channel_cache), specs)
        )


def _top_indices(records, specs_by_expr, kind, n=10) -> list[tuple[ScoreRecord, IndexSpec]]:
    of_kind = [r for r in records if specs_by_expr[r.viz_expr].kind == kind]
    of_kind.sort(key=lambda r: (-r.mean_iou, r.viz_expr))
    return [(r, specs_by_expr[r.viz_expr]) for r in of_kind[:n]]


def _pool_from_report(report: SearchReport, wl: WavelengthTable) -> list[IndexSpec]:
    """Recover the stage-2 index pool from a previously written report."""
    if report.stage1_top:
        return [parse_viz_expr(expr, wl) for expr in report.stage1_top]
    by_kind: dict[str, list[ScoreRecord]] = {"NDI": [], "SSI": []}
    for record in report.ranked:
        kind = record.viz_expr.split("(", 1)[0]
        if kind in by_kind:
            by_kind[kind].append(record)
    merged = []
    for kind in ("NDI", "SSI"):
        by_kind[kind].sort(key=lambda r: (-r.mean_iou, r.viz_expr))
        merged.extend(by_kind[kind][:10])
    if not merged:
        raise ConfigError("stage-1 report contains no NDI/SSI records")
    merged.sort(key=lambda r: (-r.mean_iou, r.viz_expr))
    return [parse_viz_expr(r.viz_expr, wl) for r in merged]


def run_search(
    dataset: Dataset,
    backend: SegmenterBackend,
    modes: set[str] | list[str],
    cfg: SearchConfig | None = None,
    cache: EmbeddingCache | None = None,
    stage1_report: SearchReport | None = None,
) -> SearchReport:
    """Run the exhaustive two-stage search over the requested modes.

    SIC requires NDI and SSI results, either from this run's stage 1 or
    from a previously computed ``stage1_report``.
    """
    cfg = cfg or SearchConfig()
    cache = cache or EmbeddingCache(capacity=max(64, 4 * len(dataset.patches)))
    modes = {m.upper() for m in modes}
    unknown = modes - set(MODES)
    if unknown:
        raise ConfigError(f"unknown search modes: {', '.join(sorted(unknown))}")
    if not modes:
        raise ConfigError("no search modes requested")
    if "SIC" in modes and not {"NDI", "SSI"} <= modes and stage1_report is None:
        raise ConfigError(
            "SIC needs stage-1 NDI and SSI results: enable both modes or pass a stage-1 report"
        )

    wl = dataset.wavelengths
    band_ids = dataset.band_ids
    channel_cache = ChannelCache(dataset, cfg)
    t0 = time.perf_counter()

    stage1_specs: list[VisualizationSpec] = []
    for mode in ("BC", "NDI", "SSI"):
        if mode in modes:
            stage1_specs.extend(enumerate_search_space(band_ids, wl, mode))
    specs_by_expr = {format_viz_expr(s): s for s in stage1_specs}
    records = _evaluate_all(stage1_specs, dataset, backend, cfg, cache, channel_cache)

    stage1_top: tuple[str, ...] = ()
    if "SIC" in modes:
        if stage1_report is not None and not {"NDI", "SSI"} <= modes:
            ranked_pool = _pool_from_report(stage1_report, wl)
        else:
            top_ndi = _top_indices(records, specs_by_expr, "NDI")
            top_ssi = _top_indices(records, specs_by_expr, "SSI")
            merged = top_ndi + top_ssi
            merged.sort(key=lambda rs: (-rs[0].mean_iou, rs[0].viz_expr))
            ranked_pool = [spec for _, spec in merged]
        stage1_top = tuple(format_viz_expr(s) for s in ranked_pool)
        sic_specs = enumerate_search_space(band_ids, wl, "SIC", top_indices=ranked_pool)
        specs_by_expr.update({format_viz_expr(s): s for s in sic_specs})
        records.extend(_evaluate_all(sic_specs, dataset, backend, cfg, cache, channel_cache))

    if cfg.include_pca:
        records.append(evaluate_viz(PcaComposite(), dataset, backend, cfg, cache, channel_cache))

    ranked = tuple(sorted(records, key=lambda r: _rank_key(r, cfg)))
    total_ms = (time.perf_counter() - t0) * 1000.0
    config_snapshot = dict(cfg.snapshot())
    config_snapshot["backend"] = backend.backend_id
    config_snapshot["modes"] = sorted(modes)
    return SearchReport(
        config=config_snapshot,
        site=dataset.site_name,
        ranked=ranked,
        stage1_top=stage1_top,
        n_visualizations=len(ranked),
        total_runtime_ms=total_ms,
    )


def pca_baseline(dataset: Dataset) -> tuple[PcaComposite, dict[str, np.ndarray]]:
    """Per-patch principal-component score images for the PCA baseline row."""
    if len(dataset.band_ids) < 3:
        raise DataError("PCA baseline needs at least 3 bands")
    images = {}
    for patch in dataset.patches:
        scores, _ = pca_score_images(patch.bands)
        images[patch.id] = scores
    return PcaComposite(), images


def runtime_profile(report: SearchReport) -> dict:
    """Per-mode seconds-per-combination plus the total runtime in minutes."""
    if not report.ranked:
        raise DataError("cannot profile an empty report")
    per_mode: dict[str, list[float]] = {}
    for record in report.ranked:
        kind = record.viz_expr.split("(", 1)[0]
        per_mode.setdefault(kind, []).append(record.wall_time_ms)
    profile = {
        kind: {
            "n": len(times),
            "sec_per_combination": sum(times) / len(times) / 1000.0,
        }
        for kind, times in sorted(per_mode.items())
    }
    return {
        "per_mode": profile,
        "total_minutes": report.total_runtime_ms / 60000.0,
    }
