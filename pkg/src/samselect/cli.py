"""Command-line front end: search, render, enumerate.

Configuration comes from flags, optionally seeded by a flat JSON config
file (flags override file values). Exit codes: 2 for configuration
errors, 3 for data errors, 4 for backend errors; every error path prints
to stderr only.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BackendError, ConfigError, DataError, VizExprError
from .raster import WavelengthTable, extract_patches, load_annotations, load_scene
from .search import Dataset, SearchConfig, run_search, runtime_profile
from .segmenter import DECODER_ENV, ENCODER_ENV, MockSegmenter, OnnxSamSegmenter
from .viz import enumerate_search_space, format_viz_expr, parse_viz_expr, render

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_BACKEND = 4


@dataclass
class RunConfig:
    """Validated inputs of one CLI invocation."""

    scene: str | None = None
    annotations: str | None = None
    wavelengths: str | None = None
    band_order: str | None = None
    patch_size: int = 128
    modes: str = "bc,ndi,ssi,sic"
    prompts: str = "kmeans"
    prompt_file: str | None = None
    negatives: bool = False
    seed: int = 0
    backend: str = "mock"
    encoder: str = "vit-b"
    encoder_onnx: str | None = None
    decoder_onnx: str | None = None
    tau: float = 0.1
    k: int = 10
    workers: int = 1
    top_k: int = 10
    out: str | None = None
    csv: str | None = None
    viz: str | None = None
    bands: str | None = None
    config_file: str | None = None

    def validate_common(self) -> None:
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")
        if self.top_k < 1:
            raise ConfigError("top-k: must be >= 1")
        if self.patch_size < 1:
            raise ConfigError("patch-size: must be >= 1")
        if self.backend not in ("mock", "onnx"):
            raise ConfigError(f"backend: unknown value {self.backend!r}")
        if self.encoder not in ("vit-b", "vit-l", "vit-h"):
            raise ConfigError(f"encoder: unknown value {self.encoder!r}")
        for field_name in ("scene", "annotations", "wavelengths", "prompt_file", "config_file"):
            path = getattr(self, field_name, None)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{field_name.replace('_', '-')}: file not found: {path}")


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scene", help="multiband GeoTIFF or flat-binary raster")
    parser.add_argument("--annotations", help="GeoJSON polygons or 0/1 mask raster")
    parser.add_argument("--wavelengths", help="JSON map band_id -> central wavelength (nm)")
    parser.add_argument("--band-order", dest="band_order", help="comma-separated band ids, file order")
    parser.add_argument("--patch-size", dest="patch_size", type=int, help="square patch size (default 128)")
    parser.add_argument("--config", dest="config_file", help="flat JSON config; flags override")


def _add_search_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--modes", help="comma-separated subset of bc,ndi,ssi,sic,pca")
    parser.add_argument("--prompts", choices=["manual", "centroid", "skeleton", "kmeans"])
    parser.add_argument("--prompt-file", dest="prompt_file", help="JSON manual prompts")
    parser.add_argument("--negatives", action="store_true", default=None,
                        help="add background (negative) prompts")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--backend", choices=["mock", "onnx"])
    parser.add_argument("--encoder", choices=["vit-b", "vit-l", "vit-h"])
    parser.add_argument("--encoder-onnx", dest="encoder_onnx", help=f"encoder model (env {ENCODER_ENV})")
    parser.add_argument("--decoder-onnx", dest="decoder_onnx", help=f"decoder model (env {DECODER_ENV})")
    parser.add_argument("--tau", type=float, help="mock region-grow luminance tolerance")
    parser.add_argument("--k", type=int, help="k-means cluster count")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--top-k", dest="top_k", type=int, help="rows in the printed ranking table")
    parser.add_argument("--out", help="report JSON path")
    parser.add_argument("--csv", help="report CSV path")


def _build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    config_file = getattr(args, "config_file", None)
    if config_file:
        if not Path(config_file).exists():
            raise ConfigError(f"config: file not found: {config_file}")
        try:
            with open(config_file, encoding="utf-8") as f:
                file_values = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: invalid JSON in {config_file}: {e}") from e
        for key, value in file_values.items():
            attr = key.replace("-", "_")
            if not hasattr(cfg, attr):
                raise ConfigError(f"config: unknown key {key!r}")
            setattr(cfg, attr, value)
    for attr in list(vars(cfg)):
        flag_value = getattr(args, attr, None)
        if flag_value is not None:
            setattr(cfg, attr, flag_value)
    cfg.config_file = config_file
    return cfg


def _load_wavelengths(cfg: RunConfig) -> WavelengthTable:
    if cfg.wavelengths:
        return WavelengthTable.from_json(cfg.wavelengths)
    return WavelengthTable.sentinel2a()


# Standard Sentinel-2 stack layouts, used when --band-order is omitted and
# the GeoTIFF band count matches: L2A products drop B10.
S2_L2A_ORDER = ["B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B11", "B12"]
S2_L1C_ORDER = ["B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B10", "B11", "B12"]


def _band_order(cfg: RunConfig) -> list[str] | None:
    if cfg.band_order:
        return [b.strip().upper() for b in cfg.band_order.split(",") if b.strip()]
    if cfg.scene and Path(cfg.scene).suffix.lower() in (".tif", ".tiff") and Path(cfg.scene).exists():
        import tifffile

        with tifffile.TiffFile(cfg.scene) as tif:
            shape = tif.series[0].shape
        n_bands = min(shape) if len(shape) == 3 else 1
        if n_bands == 12:
            return S2_L2A_ORDER
        if n_bands == 13:
            return S2_L1C_ORDER
    return None


def _load_dataset(cfg: RunConfig, wl: WavelengthTable) -> Dataset:
    if not cfg.scene:
        raise ConfigError("scene: required")
    if not cfg.annotations:
        raise ConfigError("annotations: required")
    scene = load_scene(cfg.scene, band_order=_band_order(cfg), wavelengths=wl)
    annotations = load_annotations(cfg.annotations, scene)
    patches = extract_patches(scene, annotations, size=cfg.patch_size)
    return Dataset(patches=tuple(patches), site_name=Path(cfg.scene).stem, wavelengths=wl)


def _make_backend(cfg: RunConfig):
    if cfg.backend == "mock":
        return MockSegmenter(tau=cfg.tau)
    encoder = cfg.encoder_onnx or os.environ.get(ENCODER_ENV)
    decoder = cfg.decoder_onnx or os.environ.get(DECODER_ENV)
    if not encoder or not decoder:
        raise ConfigError(
            f"encoder-onnx/decoder-onnx: required for the onnx backend "
            f"(or set {ENCODER_ENV}/{DECODER_ENV})"
        )
    return OnnxSamSegmenter(encoder, decoder, encoder_variant=cfg.encoder)


def _load_manual_prompts(cfg: RunConfig) -> dict:
    if not cfg.prompt_file:
        raise ConfigError("prompt-file: required when --prompts manual")
    with open(cfg.prompt_file, encoding="utf-8") as f:
        entries = json.load(f)
    prompts: dict[str, list] = {}
    for entry in entries:
        prompts.setdefault(str(entry["patch_id"]), []).append(
            (int(entry["row"]), int(entry["col"]), str(entry["label"]))
        )
    return prompts


def _print_table(report, top_k: int) -> None:
    rows = [(str(i + 1), r.viz_expr, f"{r.mean_iou:.4f}")
            for i, r in enumerate(report.ranked[:top_k])]
    widths = [max(len(x) for x in col) for col in zip(("rank", "viz", "mean IoU"), *rows)]
    header = ("rank", "viz", "mean IoU")
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        print("  ".join(x.ljust(w) for x, w in zip(row, widths)))


def cmd_search(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    cfg.validate_common()
    modes = [m.strip().lower() for m in cfg.modes.split(",") if m.strip()]
    include_pca = "pca" in modes
    modes = [m for m in modes if m != "pca"]
    if not modes:
        raise ConfigError("modes: at least one of bc,ndi,ssi,sic is required")
    if "sic" in modes and not {"ndi", "ssi"} <= set(modes):
        raise ConfigError("modes: sic requires ndi and ssi in the same run")

    wl = _load_wavelengths(cfg)
    dataset = _load_dataset(cfg, wl)
    backend = _make_backend(cfg)
    manual = _load_manual_prompts(cfg) if cfg.prompts == "manual" else {}
    search_cfg = SearchConfig(
        selector=cfg.prompts,
        seed=cfg.seed,
        negatives=cfg.negatives,
        tau=cfg.tau,
        k=cfg.k,
        workers=cfg.workers,
        include_pca=include_pca,
        manual_prompts=manual,
    )
    report = run_search(dataset, backend, modes, search_cfg)
    if cfg.out:
        report.write_json(cfg.out)
    if cfg.csv:
        report.write_csv(cfg.csv)
    _print_table(report, cfg.top_k)
    profile = runtime_profile(report)
    per_mode = ", ".join(
        f"{kind}: {stats['sec_per_combination']:.3f}s/comb ({stats['n']})"
        for kind, stats in profile["per_mode"].items()
    )
    print(f"evaluated {report.n_visualizations} visualizations in "
          f"{profile['total_minutes']:.2f} min ({per_mode})")
    return 0


def _quantize_rgb(rgb: np.ndarray) -> np.ndarray:
    # Half-up rounding keeps PNGs bit-exact across platforms.
    return np.floor(rgb * 255.0 + 0.5).astype(np.uint8)


def cmd_render(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    cfg.validate_common()
    if not cfg.viz:
        raise ConfigError("viz: required")
    if not cfg.out:
        raise ConfigError("out: required (PNG path or directory)")
    wl = _load_wavelengths(cfg)
    dataset = _load_dataset(cfg, wl)
    spec = parse_viz_expr(cfg.viz, wl)

    from PIL import Image

    out = Path(cfg.out)
    multiple = len(dataset.patches) > 1
    if multiple:
        out.mkdir(parents=True, exist_ok=True)
    written = []
    for patch in dataset.patches:
        rendered = render(patch, spec, wl)
        img = Image.fromarray(_quantize_rgb(rendered.rgb), mode="RGB")
        target = out / f"{patch.id}.png" if multiple or out.is_dir() else out
        img.save(target, format="PNG")
        written.append(str(target))
    print("\n".join(written))
    return 0


def cmd_enumerate(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    wl = _load_wavelengths(cfg)
    if cfg.bands:
        band_ids = [b.strip().upper() for b in cfg.bands.split(",") if b.strip()]
    elif cfg.scene:
        if not Path(cfg.scene).exists():
            raise ConfigError(f"scene: file not found: {cfg.scene}")
        scene = load_scene(cfg.scene, band_order=_band_order(cfg), wavelengths=wl)
        band_ids = list(scene.band_ids)
    else:
        raise ConfigError("bands: supply --bands or --scene")
    modes = [m.strip().lower() for m in cfg.modes.split(",") if m.strip()]

    counts = {}
    for mode in ("bc", "ndi", "ssi"):
        if mode in modes:
            specs = enumerate_search_space(band_ids, wl, mode.upper())
            for spec in specs:
                print(format_viz_expr(spec))
            counts[mode.upper()] = len(specs)
    if "sic" in modes:
        # Stage-1 ranking is unknown offline; the SIC count is symbolic.
        pool = min(10, math.comb(len(band_ids), 2)) + min(10, math.comb(len(band_ids), 3))
        counts["SIC"] = math.comb(pool, 3)
        print(f"# SIC: C({pool},3) = {counts['SIC']} composites from the stage-1 top indices")
    summary = ", ".join(f"{mode} {n}" for mode, n in counts.items())
    print(f"# {summary}; total {sum(counts.values())}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="samselect",
        description="Search band/index visualizations of a multiband scene "
        "by segmentation agreement with annotations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_search = sub.add_parser("search", help="run the exhaustive visualization search")
    _add_common_flags(p_search)
    _add_search_flags(p_search)
    p_search.set_defaults(func=cmd_search)

    p_render = sub.add_parser("render", help="render one visualization to PNG per patch")
    _add_common_flags(p_render)
    p_render.add_argument("--viz", help="visualization expression, e.g. NDI(B2,B8)")
    p_render.add_argument("--out", help="output PNG path (directory when multiple patches)")
    p_render.set_defaults(func=cmd_render)

    p_enum = sub.add_parser("enumerate", help="list every candidate spec of the chosen modes")
    _add_common_flags(p_enum)
    p_enum.add_argument("--bands", help="comma-separated band ids (alternative to --scene)")
    p_enum.add_argument("--modes", help="comma-separated subset of bc,ndi,ssi,sic")
    p_enum.set_defaults(func=cmd_enumerate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VizExprError as e:
        print(f"error: invalid visualization expression", file=sys.stderr)
        print(e.caret_lines(), file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except BackendError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
