"""Multiband scene ingestion, annotations, and patch extraction.

Two raster formats are supported:

* multiband GeoTIFF (read via tifffile; georeferencing tags are parsed
  when present, any interleaving),
* a flat-binary format: little-endian float32, band-sequential, row-major,
  with a JSON sidecar ``{width, height, bands:[{id, wavelength_nm}]}``
  stored next to the raster under the same stem with a ``.json`` suffix.

Annotations come either as a GeoJSON FeatureCollection of polygons (plus
optional Point features used as patch centers) or as a single-band 0/1
mask raster congruent with the scene.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import shapely
import shapely.geometry

from .errors import DataError

logger = logging.getLogger(__name__)

# GeoTIFF tag ids used to recover the affine transform and CRS.
_TAG_MODEL_PIXEL_SCALE = 33550
_TAG_MODEL_TIEPOINT = 33922
_TAG_MODEL_TRANSFORMATION = 34264
_TAG_GEO_KEY_DIRECTORY = 34735
_GEOKEY_GEOGRAPHIC_CS = 2048
_GEOKEY_PROJECTED_CS = 3072


@dataclass(frozen=True)
class WavelengthTable:
    """Central wavelength (nanometers) per band id."""

    entries: dict[str, float]

    def __post_init__(self):
        for band_id, wl in self.entries.items():
            if not wl > 0:
                raise DataError(f"wavelength for {band_id} must be positive, got {wl}")
        values = list(self.entries.values())
        if len(set(values)) != len(values):
            raise DataError("two bands share the same central wavelength")

    def wavelength(self, band_id: str) -> float:
        try:
            return self.entries[band_id]
        except KeyError:
            raise DataError(f"no wavelength entry for band {band_id!r}") from None

    def require(self, band_ids: Iterable[str]) -> None:
        missing = [b for b in band_ids if b not in self.entries]
        if missing:
            raise DataError(f"bands without wavelength entry: {', '.join(missing)}")

    def __contains__(self, band_id: str) -> bool:
        return band_id in self.entries

    @classmethod
    def from_json(cls, path: str | Path) -> "WavelengthTable":
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        if not isinstance(raw, dict):
            raise DataError(f"wavelength config {path} must be a JSON object")
        return cls({str(k): float(v) for k, v in raw.items()})

    @classmethod
    def sentinel2a(cls) -> "WavelengthTable":
        """Default Sentinel-2A central wavelengths shipped with the package."""
        raw = json.loads(
            resources.files("samselect").joinpath("data/s2a_wavelengths.json").read_text()
        )
        return cls({str(k): float(v) for k, v in raw.items()})


@dataclass(frozen=True)
class Scene:
    """An n-band raster scene, bands stacked as (n_bands, height, width)."""

    bands: np.ndarray
    band_ids: tuple[str, ...]
    geo_transform: tuple[float, float, float, float, float, float] | None = None
    crs_id: str | None = None

    def __post_init__(self):
        if self.bands.ndim != 3:
            raise DataError(f"scene bands must be 3-D (bands, rows, cols), got {self.bands.ndim}-D")
        if self.bands.shape[0] != len(self.band_ids):
            raise DataError(
                f"band count mismatch: {self.bands.shape[0]} grids vs {len(self.band_ids)} ids"
            )
        if len(set(self.band_ids)) != len(self.band_ids):
            raise DataError("band_ids must be unique")
        if len(self.band_ids) < 3:
            raise DataError("a scene needs at least 3 bands")

    @property
    def height(self) -> int:
        return self.bands.shape[1]

    @property
    def width(self) -> int:
        return self.bands.shape[2]

    def band(self, band_id: str) -> np.ndarray:
        try:
            idx = self.band_ids.index(band_id)
        except ValueError:
            raise DataError(f"unknown band {band_id!r}") from None
        return self.bands[idx]


@dataclass(frozen=True)
class AnnotationSet:
    """Object annotations: polygons, a scene-sized binary mask, patch centers."""

    mask: np.ndarray
    patch_centers: tuple[tuple[int, int], ...]
    polygons: tuple = ()

    def __post_init__(self):
        if self.mask.dtype != bool:
            raise DataError("annotation mask must be boolean")
        if not self.mask.any():
            raise DataError("annotation set is empty (no annotated pixels)")


@dataclass(frozen=True)
class Patch:
    """A size x size window of a scene plus the annotation mask restricted to it."""

    id: str
    window: tuple[int, int, int]  # (row0, col0, size)
    bands: np.ndarray  # (n_bands, size, size)
    band_ids: tuple[str, ...]
    mask: np.ndarray  # (size, size) bool

    def __post_init__(self):
        size = self.window[2]
        if self.bands.shape[1:] != (size, size) or self.mask.shape != (size, size):
            raise DataError(f"patch {self.id}: grids must be {size}x{size}")

    @property
    def size(self) -> int:
        return self.window[2]

    def band(self, band_id: str) -> np.ndarray:
        try:
            idx = self.band_ids.index(band_id)
        except ValueError:
            raise DataError(f"unknown band {band_id!r}") from None
        return self.bands[idx]


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def _is_tiff(path: Path) -> bool:
    return path.suffix.lower() in (".tif", ".tiff")


def _read_tiff_stack(path: Path) -> tuple[np.ndarray, dict]:
    import tifffile

    with tifffile.TiffFile(path) as tif:
        arr = tif.asarray()
        tags = {tag.code: tag.value for tag in tif.pages[0].tags.values()}
    return arr, tags


def _parse_geotiff_georef(tags: dict) -> tuple[tuple | None, str | None]:
    """Best-effort extraction of (geo_transform, crs_id) from GeoTIFF tags."""
    gt = None
    if _TAG_MODEL_TRANSFORMATION in tags:
        m = np.asarray(tags[_TAG_MODEL_TRANSFORMATION], dtype=float).reshape(4, 4)
        gt = (m[0, 3], m[0, 0], m[0, 1], m[1, 3], m[1, 0], m[1, 1])
    elif _TAG_MODEL_PIXEL_SCALE in tags and _TAG_MODEL_TIEPOINT in tags:
        sx, sy = tags[_TAG_MODEL_PIXEL_SCALE][0], tags[_TAG_MODEL_PIXEL_SCALE][1]
        tp = tags[_TAG_MODEL_TIEPOINT]
        i, j, x, y = tp[0], tp[1], tp[3], tp[4]
        gt = (x - i * sx, sx, 0.0, y + j * sy, 0.0, -sy)
    crs = None
    if _TAG_GEO_KEY_DIRECTORY in tags:
        keys = np.asarray(tags[_TAG_GEO_KEY_DIRECTORY], dtype=int).reshape(-1, 4)
        epsg = None
        for key_id, _, _, value in keys[1:]:
            if key_id == _GEOKEY_PROJECTED_CS:
                epsg = value
                break
            if key_id == _GEOKEY_GEOGRAPHIC_CS:
                epsg = value
        if epsg is not None and 0 < epsg < 32767:
            crs = f"EPSG:{epsg}"
    return gt, crs


def _normalize_band_axis(arr: np.ndarray, n_expected: int | None) -> np.ndarray:
    """Bring a raster array into (bands, rows, cols) order."""
    if arr.ndim == 2:
        return arr[None, :, :]
    if arr.ndim != 3:
        raise DataError(f"unsupported raster dimensionality: {arr.ndim}")
    if n_expected is not None:
        if arr.shape[0] == n_expected:
            return arr
        if arr.shape[2] == n_expected:
            return np.moveaxis(arr, 2, 0)
        return arr  # let the count check downstream report the mismatch
    # No expectation: assume the smaller axis is the band axis.
    return arr if arr.shape[0] <= arr.shape[2] else np.moveaxis(arr, 2, 0)


def load_scene(
    path: str | Path,
    band_order: Sequence[str] | None = None,
    wavelengths: WavelengthTable | None = None,
) -> Scene:
    """Load a multiband scene from GeoTIFF or the flat-binary format.

    ``band_order`` names the bands of the returned scene, in order. For
    GeoTIFF it is required (files carry no band ids) and is matched
    positionally. For flat-binary rasters the sidecar supplies names, and
    ``band_order`` only reorders them. Reflectance values are passed
    through unmodified.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"scene file not found: {path}")

    if _is_tiff(path):
        arr, tags = _read_tiff_stack(path)
        if band_order is None:
            raise DataError("band_order is required for GeoTIFF scenes (files carry no band ids)")
        arr = _normalize_band_axis(arr, len(band_order))
        if arr.shape[0] != len(band_order):
            raise DataError(
                f"band-count mismatch: file has {arr.shape[0]} bands, "
                f"band_order names {len(band_order)}"
            )
        geo_transform, crs_id = _parse_geotiff_georef(tags)
        bands = np.ascontiguousarray(arr, dtype=np.float32)
        ids = tuple(band_order)
    else:
        sidecar = _sidecar_path(path)
        if not sidecar.exists():
            raise DataError(f"flat-binary raster {path} is missing its JSON sidecar {sidecar}")
        with open(sidecar, encoding="utf-8") as f:
            header = json.load(f)
        width, height = int(header["width"]), int(header["height"])
        file_ids = [str(b["id"]) for b in header["bands"]]
        raw = np.fromfile(path, dtype="<f4")
        expected = width * height * len(file_ids)
        if raw.size != expected:
            raise DataError(
                f"flat-binary raster {path} has {raw.size} float32 values, expected {expected}"
            )
        stack = raw.reshape(len(file_ids), height, width)
        if band_order is None:
            ids = tuple(file_ids)
            bands = stack
        else:
            if len(band_order) != len(file_ids):
                raise DataError(
                    f"band-count mismatch: file has {len(file_ids)} bands, "
                    f"band_order names {len(band_order)}"
                )
            missing = [b for b in band_order if b not in file_ids]
            if missing:
                raise DataError(f"bands not present in file: {', '.join(missing)}")
            bands = np.stack([stack[file_ids.index(b)] for b in band_order])
            ids = tuple(band_order)
        if wavelengths is None:
            wavelengths = WavelengthTable(
                {str(b["id"]): float(b["wavelength_nm"]) for b in header["bands"]}
            )
        geo_transform, crs_id = None, None

    if wavelengths is None:
        raise DataError("a WavelengthTable is required when the file carries no wavelengths")
    wavelengths.require(ids)
    return Scene(bands=bands, band_ids=ids, geo_transform=geo_transform, crs_id=crs_id)


def write_scene(scene: Scene, path: str | Path, wavelengths: WavelengthTable) -> Path:
    """Write a scene in the flat-binary format (raster + JSON sidecar)."""
    path = Path(path)
    wavelengths.require(scene.band_ids)
    data = np.ascontiguousarray(scene.bands, dtype="<f4")
    data.tofile(path)
    header = {
        "width": scene.width,
        "height": scene.height,
        "bands": [
            {"id": b, "wavelength_nm": wavelengths.wavelength(b)} for b in scene.band_ids
        ],
    }
    with open(_sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2)
    return path


def _pixel_transform(scene: Scene):
    """Return a function mapping annotation coordinates to pixel (x=col, y=row) space."""
    gt = scene.geo_transform
    if gt is None:
        return lambda x, y: (x, y)
    x0, dx, rx, y0, ry, dy = gt
    det = dx * dy - rx * ry
    if det == 0:
        raise DataError("scene geo_transform is singular")

    def to_pixel(x, y):
        px = (dy * (x - x0) - rx * (y - y0)) / det
        py = (-ry * (x - x0) + dx * (y - y0)) / det
        return px, py

    return to_pixel


def _transform_geometry(geom, to_pixel):
    return shapely.transform(geom, lambda coords: np.column_stack(to_pixel(coords[:, 0], coords[:, 1])))


def rasterize_polygons(geoms: Sequence, height: int, width: int) -> np.ndarray:
    """Rasterize polygons (pixel coordinates) by center-of-pixel inclusion.

    Pixel (row r, col c) covers [c, c+1) x [r, r+1); its center (c+0.5, r+0.5)
    is tested against the union of the given geometries. Boundary centers
    count as inside. Overlaps union without double counting.
    """
    mask = np.zeros((height, width), dtype=bool)
    for geom in geoms:
        minx, miny, maxx, maxy = geom.bounds
        c0 = max(0, int(np.floor(minx - 0.5)))
        c1 = min(width - 1, int(np.ceil(maxx)))
        r0 = max(0, int(np.floor(miny - 0.5)))
        r1 = min(height - 1, int(np.ceil(maxy)))
        if c1 < c0 or r1 < r0:
            continue
        cols = np.arange(c0, c1 + 1)
        rows = np.arange(r0, r1 + 1)
        cc, rr = np.meshgrid(cols, rows)
        inside = shapely.intersects_xy(geom, cc + 0.5, rr + 0.5)
        mask[r0 : r1 + 1, c0 : c1 + 1] |= inside
    return mask


def _centers_from_mask(mask: np.ndarray) -> list[tuple[int, int]]:
    from scipy import ndimage

    labels, n = ndimage.label(mask, structure=np.ones((3, 3), bool))
    centers = []
    for rc in ndimage.center_of_mass(mask, labels, range(1, n + 1)):
        centers.append((int(round(rc[0])), int(round(rc[1]))))
    return centers


def load_annotations(path: str | Path, scene: Scene) -> AnnotationSet:
    """Load annotations from GeoJSON polygons or a congruent 0/1 mask raster.

    Polygon features are rasterized by center-of-pixel inclusion and
    unioned. Point features, when present, become patch centers; otherwise
    centers fall back to per-polygon (or per-component) centroids.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"annotation file not found: {path}")

    if _is_tiff(path):
        arr, tags = _read_tiff_stack(path)
        arr = np.squeeze(arr)
        if arr.ndim != 2:
            raise DataError("mask raster must be single-band")
        if arr.shape != (scene.height, scene.width):
            raise DataError(
                f"mask raster shape {arr.shape} does not match scene "
                f"{(scene.height, scene.width)}"
            )
        values = np.unique(arr)
        if not np.isin(values, (0, 1)).all():
            raise DataError(f"mask raster is not binary (values {values[:10]})")
        _, crs = _parse_geotiff_georef(tags)
        if crs is not None and scene.crs_id is not None and crs != scene.crs_id:
            raise DataError(f"CRS mismatch: scene {scene.crs_id}, annotations {crs}")
        mask = arr.astype(bool)
        if not mask.any():
            raise DataError("annotation mask is empty")
        return AnnotationSet(mask=mask, patch_centers=tuple(_centers_from_mask(mask)))

    with open(path, encoding="utf-8") as f:
        collection = json.load(f)
    legacy_crs = collection.get("crs", {}).get("properties", {}).get("name")
    if legacy_crs and scene.crs_id and legacy_crs.split(":")[-1] != scene.crs_id.split(":")[-1]:
        raise DataError(f"CRS mismatch: scene {scene.crs_id}, annotations {legacy_crs}")

    to_pixel = _pixel_transform(scene)
    polygons = []
    centers: list[tuple[int, int]] = []
    features = collection.get("features", [])
    for feature in features:
        geom_dict = feature.get("geometry") or {}
        gtype = geom_dict.get("type")
        if gtype in ("Polygon", "MultiPolygon"):
            geom = _transform_geometry(shapely.geometry.shape(geom_dict), to_pixel)
            polygons.append(geom)
        elif gtype == "Point":
            px, py = to_pixel(*geom_dict["coordinates"][:2])
            centers.append((int(np.floor(py)), int(np.floor(px))))
        elif gtype == "MultiPoint":
            for x, y in geom_dict["coordinates"]:
                px, py = to_pixel(x, y)
                centers.append((int(np.floor(py)), int(np.floor(px))))

    if not polygons:
        raise DataError("annotation set contains no polygons")
    mask = rasterize_polygons(polygons, scene.height, scene.width)
    if not mask.any():
        raise DataError("no overlap: polygons cover no pixel centers inside the scene")
    if not centers:
        # Geometries are in pixel space at this point; centroids make
        # serviceable default centers when no Point features were supplied.
        for geom in polygons:
            centers.append((int(np.floor(geom.centroid.y)), int(np.floor(geom.centroid.x))))
    return AnnotationSet(mask=mask, patch_centers=tuple(centers), polygons=tuple(polygons))


def extract_patches(scene: Scene, ann: AnnotationSet, size: int = 128) -> list[Patch]:
    """Cut one size x size patch per annotation center.

    Windows are clamped (shifted inward, never shrunk or padded) at scene
    edges, so every patch reads entirely inside the scene.
    """
    if size > scene.height or size > scene.width:
        raise DataError(
            f"scene {scene.height}x{scene.width} is smaller than the patch size {size}"
        )
    patches = []
    for i, (row, col) in enumerate(ann.patch_centers):
        r0 = int(np.clip(row - size // 2, 0, scene.height - size))
        c0 = int(np.clip(col - size // 2, 0, scene.width - size))
        patches.append(
            Patch(
                id=f"patch{i:03d}",
                window=(r0, c0, size),
                bands=scene.bands[:, r0 : r0 + size, c0 : c0 + size].copy(),
                band_ids=scene.band_ids,
                mask=ann.mask[r0 : r0 + size, c0 : c0 + size].copy(),
            )
        )
    return patches
