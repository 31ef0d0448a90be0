"""Candidate visualizations: composites, spectral indices, rendering, grammar.

A visualization maps an n-band patch to a 3-channel image in [0, 1]. Four
families are searched:

* band composites (BC): three raw bands, red gets the longest wavelength;
* normalized difference indices (NDI): (b1 - b2) / (b1 + b2), replicated
  to all three channels;
* spectral shape indices (SSI): center band minus a virtual band linearly
  interpolated between two flanking bands at their central wavelengths;
* spectral index composites (SIC): three distinct NDI/SSI images, one per
  channel, channel order by stage-1 rank.

A PCA composite (per-patch principal-component scores) serves as baseline.
Every spec serializes to a canonical expression string, e.g. ``NDI(B2,B8)``,
and round-trips through the parser.
"""

from __future__ import annotations

import itertools
import logging
import re
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import DataError, VizExprError
from .raster import Patch, WavelengthTable

logger = logging.getLogger(__name__)

DEFAULT_P_LOW = 1.0
DEFAULT_P_HIGH = 99.0


@dataclass(frozen=True)
class BandComposite:
    """Three raw bands, stored in channel order (red, green, blue)."""

    bands: tuple[str, str, str]

    kind = "BC"


@dataclass(frozen=True)
class NormalizedDifference:
    """(b1 - b2) / (b1 + b2); canonical orientation puts the shorter wavelength first."""

    b1: str
    b2: str

    kind = "NDI"


@dataclass(frozen=True)
class SpectralShape:
    """Center band minus the wavelength-interpolated virtual band, flanks ordered by wavelength."""

    b_minus: str
    b_center: str
    b_plus: str

    kind = "SSI"


IndexSpec = Union[NormalizedDifference, SpectralShape]


@dataclass(frozen=True)
class IndexComposite:
    """Three distinct index images, stored in channel order (red, green, blue)."""

    channels: tuple[IndexSpec, IndexSpec, IndexSpec]

    kind = "SIC"


@dataclass(frozen=True)
class PcaComposite:
    """Principal-component score images as channels (baseline visualization)."""

    components: tuple[int, int, int] = (1, 2, 3)

    kind = "PCA"


VisualizationSpec = Union[BandComposite, NormalizedDifference, SpectralShape, IndexComposite, PcaComposite]


@dataclass(frozen=True)
class IndexImage:
    values: np.ndarray
    spec: IndexSpec


@dataclass(frozen=True)
class RenderedVisualization:
    """3-channel (rows, cols, 3) image in [0, 1] plus its provenance."""

    rgb: np.ndarray
    spec: VisualizationSpec
    patch_id: str

    @property
    def viz_expr(self) -> str:
        return format_viz_expr(self.spec)


# ---------------------------------------------------------------------------
# spec construction (canonicalizing factories)
# ---------------------------------------------------------------------------

def make_bc(bands: Sequence[str], wl: WavelengthTable) -> BandComposite:
    """Canonicalize an unordered band triple: red <- longest wavelength."""
    if len(bands) != 3 or len(set(bands)) != 3:
        raise DataError(f"BC needs three distinct bands, got {tuple(bands)}")
    ordered = tuple(sorted(bands, key=wl.wavelength, reverse=True))
    return BandComposite(bands=ordered)


def make_ndi(b1: str, b2: str, wl: WavelengthTable) -> NormalizedDifference:
    """Canonicalize an unordered band pair: shorter wavelength first."""
    if b1 == b2:
        raise DataError(f"NDI needs two distinct bands, got ({b1}, {b2})")
    if wl.wavelength(b1) > wl.wavelength(b2):
        b1, b2 = b2, b1
    return NormalizedDifference(b1=b1, b2=b2)


def make_ssi(b_minus: str, b_center: str, b_plus: str, wl: WavelengthTable) -> SpectralShape:
    lm, lc, lp = wl.wavelength(b_minus), wl.wavelength(b_center), wl.wavelength(b_plus)
    if not (lm < lc < lp):
        raise DataError(
            f"SSI wavelength ordering violated: need lambda({b_minus}) < lambda({b_center})"
            f" < lambda({b_plus}), got {lm}, {lc}, {lp} nm"
        )
    return SpectralShape(b_minus=b_minus, b_center=b_center, b_plus=b_plus)


def make_sic(channels: Sequence[IndexSpec]) -> IndexComposite:
    if len(channels) != 3:
        raise DataError("SIC needs exactly three index specs")
    if len(set(channels)) != 3:
        raise DataError("SIC channels must be distinct indices")
    return IndexComposite(channels=tuple(channels))


# ---------------------------------------------------------------------------
# numeric operations
# ---------------------------------------------------------------------------

def normalize_percentile(
    channel: np.ndarray,
    p_low: float = DEFAULT_P_LOW,
    p_high: float = DEFAULT_P_HIGH,
    bounds: tuple[float, float] | None = None,
) -> np.ndarray:
    """Percentile-stretch a grid to [0, 1].

    Values are clamped to the [p_low, p_high] percentile range (linear
    interpolation definition) and rescaled; a constant grid maps to 0.5.
    ``bounds`` overrides the percentile computation with precomputed
    (lo, hi) statistics, for normalization scopes wider than one patch.
    """
    channel = np.asarray(channel, dtype=np.float64)
    if channel.size == 0:
        raise ValueError("cannot normalize an empty grid")
    if not p_low < p_high:
        raise ValueError(f"need p_low < p_high, got {p_low} >= {p_high}")
    if bounds is None:
        lo, hi = np.percentile(channel, [p_low, p_high])
    else:
        lo, hi = bounds
    if hi == lo:
        return np.full(channel.shape, 0.5)
    return np.clip((channel - lo) / (hi - lo), 0.0, 1.0)


def compute_ndi(source: Patch, b1: str, b2: str) -> IndexImage:
    """Normalized difference (b1 - b2) / (b1 + b2), zero where the sum is zero."""
    x1 = source.band(b1).astype(np.float64)
    x2 = source.band(b2).astype(np.float64)
    den = x1 + x2
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(den == 0.0, 0.0, (x1 - x2) / den)
    return IndexImage(values=values, spec=NormalizedDifference(b1=b1, b2=b2))


def interpolation_factor(lambda_minus: float, lambda_c: float, lambda_plus: float) -> float:
    """Linear interpolation weight of the virtual band at lambda_c.

    Endpoints are allowed (factor 0 or 1); the flanks must be strictly
    ordered.
    """
    if not (lambda_minus < lambda_plus and lambda_minus <= lambda_c <= lambda_plus):
        raise DataError(
            f"wavelength ordering violated: need {lambda_minus} <= {lambda_c} <= {lambda_plus} "
            "with strictly ordered flanks"
        )
    return (lambda_c - lambda_minus) / (lambda_plus - lambda_minus)


def virtual_band(
    source: Patch, b_minus: str, b_plus: str, lambda_c: float, wl: WavelengthTable
) -> np.ndarray:
    """Reflectance interpolated between two flanking bands at wavelength lambda_c."""
    f = interpolation_factor(wl.wavelength(b_minus), lambda_c, wl.wavelength(b_plus))
    lo = source.band(b_minus).astype(np.float64)
    hi = source.band(b_plus).astype(np.float64)
    return lo + (hi - lo) * f


def compute_ssi(
    source: Patch, b_minus: str, b_center: str, b_plus: str, wl: WavelengthTable
) -> IndexImage:
    """Spectral shape: center band minus the virtual band at its wavelength."""
    spec = make_ssi(b_minus, b_center, b_plus, wl)
    virtual = virtual_band(source, b_minus, b_plus, wl.wavelength(b_center), wl)
    values = source.band(b_center).astype(np.float64) - virtual
    return IndexImage(values=values, spec=spec)


def compute_index(source: Patch, spec: IndexSpec, wl: WavelengthTable) -> IndexImage:
    if isinstance(spec, NormalizedDifference):
        return compute_ndi(source, spec.b1, spec.b2)
    return compute_ssi(source, spec.b_minus, spec.b_center, spec.b_plus, wl)


def pca_score_images(bands: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project a (n_bands, rows, cols) stack onto its top-3 principal components.

    Bands are centered per band over the patch, the band x band covariance
    eigendecomposed, and pixels projected onto the top-3 eigenvectors
    (descending eigenvalue; the largest-magnitude loading of each vector is
    made positive). Rank-deficient directions yield constant-zero score
    images, which normalize to 0.5 downstream.

    Returns (scores (3, rows, cols), eigenvalues (descending, top-3)).
    """
    n_bands, rows, cols = bands.shape
    x = bands.reshape(n_bands, -1).astype(np.float64)
    n_pixels = x.shape[1]
    centered = x - x.mean(axis=1, keepdims=True)
    if n_pixels > 1:
        cov = centered @ centered.T / (n_pixels - 1)
    else:
        cov = np.zeros((n_bands, n_bands))
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    tol = max(eigvals[0], 0.0) * 1e-10
    scores = np.zeros((3, rows, cols))
    out_vals = np.zeros(3)
    for i in range(3):
        if i >= n_bands or eigvals[i] <= tol:
            logger.warning("PCA component %d is degenerate; emitting a constant channel", i + 1)
            continue
        vec = eigvecs[:, i]
        if vec[np.argmax(np.abs(vec))] < 0:
            vec = -vec
        scores[i] = (vec @ centered).reshape(rows, cols)
        out_vals[i] = eigvals[i]
    return scores, out_vals


ChannelSource = Union[tuple, IndexSpec]  # ("band", id) or an index spec


def channel_sources(spec: VisualizationSpec) -> list[ChannelSource]:
    """The per-channel grid sources of a spec (single entry = replicate to 3).

    PCA composites have no per-channel sources (the three score images come
    from one eigensolve) and are rendered directly.
    """
    if isinstance(spec, BandComposite):
        return [("band", b) for b in spec.bands]
    if isinstance(spec, (NormalizedDifference, SpectralShape)):
        return [spec]
    if isinstance(spec, IndexComposite):
        return list(spec.channels)
    raise DataError(f"spec kind {getattr(spec, 'kind', type(spec).__name__)} has no channel sources")


def channel_source_key(source: ChannelSource) -> str:
    if isinstance(source, tuple):
        return f"band:{source[1]}"
    return format_viz_expr(source)


def source_grid(patch: Patch, source: ChannelSource, wl: WavelengthTable) -> np.ndarray:
    """Raw (unnormalized) grid for one channel source."""
    if isinstance(source, tuple):
        return patch.band(source[1]).astype(np.float64)
    return compute_index(patch, source, wl).values


def render(
    patch: Patch,
    spec: VisualizationSpec,
    wl: WavelengthTable,
    p_low: float = DEFAULT_P_LOW,
    p_high: float = DEFAULT_P_HIGH,
    channel_bounds: Sequence[tuple[float, float] | None] | None = None,
) -> RenderedVisualization:
    """Render a visualization spec for one patch as a (rows, cols, 3) image in [0, 1].

    Single-index specs (NDI/SSI) are normalized once and replicated into
    all three channels; composite specs normalize each channel
    independently. ``channel_bounds`` optionally fixes the (lo, hi)
    stretch per channel instead of per-patch percentiles.
    """

    def norm(grid, channel_idx):
        bounds = channel_bounds[channel_idx] if channel_bounds is not None else None
        return normalize_percentile(grid, p_low, p_high, bounds=bounds)

    if isinstance(spec, PcaComposite):
        scores, _ = pca_score_images(patch.bands)
        channels = [norm(scores[i], i) for i in range(3)]
    else:
        sources = channel_sources(spec)
        channels = [norm(source_grid(patch, src, wl), i) for i, src in enumerate(sources)]
        if len(channels) == 1:
            channels = channels * 3
    rgb = np.stack(channels, axis=-1)
    return RenderedVisualization(rgb=rgb, spec=spec, patch_id=patch.id)


# ---------------------------------------------------------------------------
# search-space enumeration
# ---------------------------------------------------------------------------

def enumerate_search_space(
    band_ids: Sequence[str],
    wl: WavelengthTable,
    mode: str,
    top_indices: Sequence[IndexSpec] | None = None,
) -> list[VisualizationSpec]:
    """Enumerate every candidate spec of one family, in deterministic order.

    BC/SSI run over all C(n,3) unordered band triples, NDI over all C(n,2)
    pairs; SIC over all C(len(pool),3) triples of the stage-1 index pool,
    preserving pool (rank) order so red maps to the best-ranked child.
    """
    mode = mode.upper()
    wl.require(band_ids)
    if mode == "BC":
        return [make_bc(triple, wl) for triple in itertools.combinations(band_ids, 3)]
    if mode == "NDI":
        return [make_ndi(a, b, wl) for a, b in itertools.combinations(band_ids, 2)]
    if mode == "SSI":
        specs = []
        for triple in itertools.combinations(band_ids, 3):
            lo, mid, hi = sorted(triple, key=wl.wavelength)
            specs.append(make_ssi(lo, mid, hi, wl))
        return specs
    if mode == "SIC":
        if top_indices is None:
            raise DataError("SIC enumeration requires the stage-1 top index pool")
        if len(top_indices) < 3:
            raise DataError(f"SIC pool needs at least 3 indices, got {len(top_indices)}")
        if len(set(top_indices)) != len(top_indices):
            raise DataError("SIC pool contains duplicate indices")
        return [make_sic(triple) for triple in itertools.combinations(top_indices, 3)]
    raise DataError(f"unknown enumeration mode {mode!r}")


# ---------------------------------------------------------------------------
# expression grammar
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"(?P<name>[A-Za-z][A-Za-z0-9]*)|(?P<num>\d+)|(?P<punct>[(),])")


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise VizExprError(f"unexpected character {text[pos]!r}", text, pos)
        tokens.append((m.lastgroup, m.group(), pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, wl: WavelengthTable):
        self.text = text
        self.wl = wl
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind: str, value: str | None = None):
        tok_kind, tok_value, pos = self.tokens[self.i]
        if tok_kind != kind or (value is not None and tok_value != value):
            expected = value if value is not None else kind
            raise VizExprError(f"expected {expected!r}", self.text, pos)
        self.i += 1
        return tok_value, pos

    def band(self) -> str:
        value, pos = self.take("name")
        band_id = value.upper()
        if band_id not in self.wl:
            raise VizExprError(f"unknown band token {value!r}", self.text, pos)
        return band_id

    def parse(self) -> VisualizationSpec:
        spec = self.expr(top=True)
        kind, _, pos = self.peek()
        if kind != "end":
            raise VizExprError("trailing input after expression", self.text, pos)
        return spec

    def expr(self, top: bool) -> VisualizationSpec:
        name, pos = self.take("name")
        keyword = name.upper()
        if keyword == "BC" and top:
            self.take("punct", "(")
            bands = [self.band()]
            for _ in range(2):
                self.take("punct", ",")
                bands.append(self.band())
            self.take("punct", ")")
            try:
                return make_bc(bands, self.wl)
            except DataError as e:
                raise VizExprError(str(e), self.text, pos) from None
        if keyword == "NDI":
            self.take("punct", "(")
            b1 = self.band()
            self.take("punct", ",")
            b2 = self.band()
            self.take("punct", ")")
            try:
                return make_ndi(b1, b2, self.wl)
            except DataError as e:
                raise VizExprError(str(e), self.text, pos) from None
        if keyword == "SSI":
            self.take("punct", "(")
            bm = self.band()
            self.take("punct", ",")
            bc = self.band()
            self.take("punct", ",")
            bp = self.band()
            self.take("punct", ")")
            try:
                return make_ssi(bm, bc, bp, self.wl)
            except DataError as e:
                raise VizExprError(str(e), self.text, pos) from None
        if keyword == "SIC" and top:
            self.take("punct", "(")
            children = [self.index_child()]
            for _ in range(2):
                self.take("punct", ",")
                children.append(self.index_child())
            self.take("punct", ")")
            try:
                return make_sic(children)
            except DataError as e:
                raise VizExprError(str(e), self.text, pos) from None
        if keyword == "PCA" and top:
            self.take("punct", "(")
            components = [int(self.take("num")[0])]
            for _ in range(2):
                self.take("punct", ",")
                components.append(int(self.take("num")[0]))
            self.take("punct", ")")
            if tuple(components) != (1, 2, 3):
                raise VizExprError("PCA components must be (1,2,3)", self.text, pos)
            return PcaComposite()
        raise VizExprError(f"unknown visualization kind {name!r}", self.text, pos)

    def index_child(self) -> IndexSpec:
        kind, value, pos = self.peek()
        if kind != "name" or value.upper() not in ("NDI", "SSI"):
            raise VizExprError("SIC children must be NDI or SSI expressions", self.text, pos)
        child = self.expr(top=False)
        assert isinstance(child, (NormalizedDifference, SpectralShape))
        return child


def parse_viz_expr(text: str, wl: WavelengthTable) -> VisualizationSpec:
    """Parse a visualization expression; see the grammar in the module docstring."""
    return _Parser(text, wl).parse()


def format_viz_expr(spec: VisualizationSpec) -> str:
    """Canonical expression string: uppercase band ids, no spaces."""
    if isinstance(spec, BandComposite):
        return f"BC({spec.bands[0]},{spec.bands[1]},{spec.bands[2]})"
    if isinstance(spec, NormalizedDifference):
        return f"NDI({spec.b1},{spec.b2})"
    if isinstance(spec, SpectralShape):
        return f"SSI({spec.b_minus},{spec.b_center},{spec.b_plus})"
    if isinstance(spec, IndexComposite):
        return f"SIC({','.join(format_viz_expr(c) for c in spec.channels)})"
    if isinstance(spec, PcaComposite):
        return f"PCA({spec.components[0]},{spec.components[1]},{spec.components[2]})"
    raise DataError(f"cannot format spec of type {type(spec).__name__}")
