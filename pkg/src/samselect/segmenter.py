"""Promptable segmentation backends and the image-embedding cache.

Two backends ship with the package:

* :class:`MockSegmenter` - a deterministic luminance region-grower used as
  a test oracle and for fast end-to-end runs without model weights;
* :class:`OnnxSamSegmenter` - ONNX encoder/decoder inference (ViT-B by
  default), with preprocessing constants read from the exported model's
  metadata sidecar, never hard-coded.

Both expose the same surface: ``embed`` (pure in the rendered image) and
``decode`` (pure in embedding + points). :func:`predict` runs one decode
per foreground prompt, keeps each decode's best-quality candidate, and
unions the results.
"""

from __future__ import annotations

import json
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BackendError, DataError
from .prompts import PromptSet
from .viz import RenderedVisualization

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class BackendCapabilities:
    supports_negative_prompts: bool
    embedding_cacheable: bool


@dataclass(frozen=True)
class ImageEmbedding:
    """Encoder output for one rendered visualization, keyed by (backend, patch, viz)."""

    backend_id: str
    patch_id: str
    viz_expr: str
    payload: np.ndarray
    shape: tuple[int, ...]
    source_hw: tuple[int, int]

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.backend_id, self.patch_id, self.viz_expr)


@dataclass(frozen=True)
class SegmentationResult:
    """Final binary mask plus the quality score of each per-prompt chosen candidate."""

    mask: np.ndarray
    quality: tuple[float, ...]
    chosen_candidate: int

    def __post_init__(self):
        if self.mask.dtype != bool:
            raise DataError("segmentation mask must be boolean")


class SegmenterBackend:
    """Interface: subclasses provide backend_id, capabilities, embed, decode."""

    backend_id: str = "abstract"
    capabilities = BackendCapabilities(False, False)

    def embed(self, rendered: RenderedVisualization) -> ImageEmbedding:
        raise NotImplementedError

    def decode(
        self, emb: ImageEmbedding, points: np.ndarray, labels: np.ndarray
    ) -> tuple[list[np.ndarray], list[float]]:
        """Run one prompt decode; returns (candidate masks, quality scores)."""
        raise NotImplementedError


# ---------------------------------------------------------------------------
# mock backend
# ---------------------------------------------------------------------------

def _dilate8(mask: np.ndarray) -> np.ndarray:
    """8-neighbor binary dilation via padded slicing (faster than generic scipy)."""
    padded = np.pad(mask, 1, constant_values=False)
    out = mask.copy()
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr or dc:
                out |= padded[1 + dr : padded.shape[0] - 1 + dr, 1 + dc : padded.shape[1] - 1 + dc]
    return out


def _grow_from(lum: np.ndarray, prompt: tuple[int, int], tau: float) -> np.ndarray:
    row, col = prompt
    eligible = np.abs(lum - lum[row, col]) <= tau
    labels, _ = ndimage.label(eligible, structure=_EIGHT_CONNECTED)
    return labels == labels[row, col]


def mock_region_grow(rendered_rgb: np.ndarray, prompt: tuple[int, int], tau: float = 0.1) -> np.ndarray:
    """Grow an 8-connected region of similar luminance around a prompt pixel.

    Luminance is the mean of the three channels; the region is the
    connected component, through pixels within tau of the prompt's
    luminance, that contains the prompt.
    """
    if tau <= 0:
        raise DataError(f"tau must be positive, got {tau}")
    lum = np.asarray(rendered_rgb, dtype=np.float64).mean(axis=2)
    return _grow_from(lum, prompt, tau)


def _region_quality(lum: np.ndarray, region: np.ndarray, tau: float) -> float:
    """Boundary contrast score: min(1, |mean inside - mean outside| along the boundary / tau).

    "Along the boundary" compares region pixels that touch the outside with
    outside pixels that touch the region. A region with no outside boundary
    has no contrast evidence and scores 0.
    """
    outer = _dilate8(region) & ~region
    if not outer.any():
        return 0.0
    inner = region & _dilate8(outer)
    contrast = abs(float(lum[inner].mean()) - float(lum[outer].mean()))
    return min(1.0, contrast / tau)


class MockSegmenter(SegmenterBackend):
    """Deterministic region-growing stand-in for a promptable segmenter."""

    backend_id = "mock"
    capabilities = BackendCapabilities(supports_negative_prompts=False, embedding_cacheable=True)

    def __init__(self, tau: float = 0.1):
        if tau <= 0:
            raise DataError(f"tau must be positive, got {tau}")
        self.tau = tau

    def embed(self, rendered: RenderedVisualization) -> ImageEmbedding:
        payload = np.array(rendered.rgb, copy=True)
        h, w = payload.shape[:2]
        return ImageEmbedding(
            backend_id=self.backend_id,
            patch_id=rendered.patch_id,
            viz_expr=rendered.viz_expr,
            payload=payload,
            shape=payload.shape,
            source_hw=(h, w),
        )

    def decode(self, emb, points, labels):
        fg = [tuple(p) for p, label in zip(points, labels) if label == 1]
        if not fg:
            raise BackendError("mock decode needs a foreground point")
        row, col = fg[0]
        lum = emb.payload.mean(axis=2)
        mask = _grow_from(lum, (int(row), int(col)), self.tau)
        return [mask], [_region_quality(lum, mask, self.tau)]


class CountingMockSegmenter(MockSegmenter):
    """Mock backend with a thread-safe embed-call counter, for cache contracts."""

    def __init__(self, tau: float = 0.1, embed_delay: float = 0.0):
        super().__init__(tau)
        self.embed_calls = 0
        self.embed_delay = embed_delay
        self._count_lock = threading.Lock()

    def embed(self, rendered):
        with self._count_lock:
            self.embed_calls += 1
        if self.embed_delay:
            time.sleep(self.embed_delay)
        return super().embed(rendered)


# ---------------------------------------------------------------------------
# ONNX SAM backend
# ---------------------------------------------------------------------------

ENCODER_ENV = "SAMSELECT_ENCODER"
DECODER_ENV = "SAMSELECT_DECODER"


def _bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2-D grid (or stack of grids on the last axes)."""
    in_h, in_w = image.shape[-2:]
    zoom = [1.0] * (image.ndim - 2) + [out_h / in_h, out_w / in_w]
    return ndimage.zoom(image, zoom, order=1, grid_mode=True, mode="nearest")


class OnnxSamSegmenter(SegmenterBackend):
    """Encoder/decoder ONNX inference against the export contract.

    The exported encoder takes a standardized ``input_size`` x
    ``input_size`` 3-channel image; the decoder takes an embedding plus
    point coordinates/labels and returns candidate low-resolution mask
    logits and quality scores. This class performs the letterbox resize,
    standardization (constants from the metadata sidecar), coordinate
    scaling, logit upsampling, and thresholding at 0.

    One inference session pair is created per worker thread.
    """

    capabilities = BackendCapabilities(supports_negative_prompts=True, embedding_cacheable=True)

    def __init__(
        self,
        encoder_path: str | Path,
        decoder_path: str | Path,
        metadata_path: str | Path | None = None,
        encoder_variant: str = "vit-b",
        session_provider=None,
    ):
        self.encoder_path = Path(encoder_path)
        self.decoder_path = Path(decoder_path)
        self.encoder_variant = encoder_variant
        self.backend_id = f"onnx-{encoder_variant}"
        self._session_provider = session_provider
        self._local = threading.local()
        if metadata_path is None:
            metadata_path = self.encoder_path.parent / "metadata.json"
        try:
            with open(metadata_path, encoding="utf-8") as f:
                meta = json.load(f)
            self.input_size = int(meta["input_size"])
            self.pixel_mean = np.asarray(meta["pixel_mean"], dtype=np.float32).reshape(3, 1, 1)
            self.pixel_std = np.asarray(meta["pixel_std"], dtype=np.float32).reshape(3, 1, 1)
            self.embedding_shape = tuple(meta["embedding_shape"])
        except (OSError, KeyError, ValueError) as e:
            raise BackendError(f"cannot read model metadata sidecar {metadata_path}: {e}") from e

    def _make_session(self, path: Path):
        if self._session_provider is not None:
            return self._session_provider(str(path))
        try:
            import onnxruntime
        except ImportError as e:
            raise BackendError(
                "onnxruntime is required for the ONNX backend (pip install samselect[onnx])"
            ) from e
        if not path.exists():
            raise BackendError(f"model file not found: {path}")
        options = onnxruntime.SessionOptions()
        options.intra_op_num_threads = 1
        try:
            return onnxruntime.InferenceSession(
                str(path), sess_options=options, providers=["CPUExecutionProvider"]
            )
        except Exception as e:
            raise BackendError(f"failed to load ONNX model {path}: {e}") from e

    def _sessions(self):
        if not hasattr(self._local, "encoder"):
            self._local.encoder = self._make_session(self.encoder_path)
            self._local.decoder = self._make_session(self.decoder_path)
        return self._local.encoder, self._local.decoder

    def _letterbox(self, rgb: np.ndarray) -> tuple[np.ndarray, int, int]:
        h, w = rgb.shape[:2]
        scale = self.input_size / max(h, w)
        new_h, new_w = round(h * scale), round(w * scale)
        chw = np.moveaxis(rgb, 2, 0) * 255.0
        resized = _bilinear_resize(chw, new_h, new_w).astype(np.float32)
        standardized = (resized - self.pixel_mean) / self.pixel_std
        padded = np.zeros((3, self.input_size, self.input_size), dtype=np.float32)
        padded[:, :new_h, :new_w] = standardized
        return padded, new_h, new_w

    def embed(self, rendered: RenderedVisualization) -> ImageEmbedding:
        encoder, _ = self._sessions()
        h, w = rendered.rgb.shape[:2]
        padded, _, _ = self._letterbox(rendered.rgb)
        try:
            (embedding,) = encoder.run(None, {"image": padded[None]})
        except Exception as e:
            raise BackendError(f"encoder inference failed: {e}") from e
        return ImageEmbedding(
            backend_id=self.backend_id,
            patch_id=rendered.patch_id,
            viz_expr=rendered.viz_expr,
            payload=np.asarray(embedding),
            shape=tuple(np.asarray(embedding).shape),
            source_hw=(h, w),
        )

    def decode(self, emb, points, labels):
        _, decoder = self._sessions()
        h, w = emb.source_hw
        scale = self.input_size / max(h, w)
        coords = np.empty((1, len(points), 2), dtype=np.float32)
        coords[0, :, 0] = (np.asarray(points)[:, 1] + 0.5) * scale  # x from col
        coords[0, :, 1] = (np.asarray(points)[:, 0] + 0.5) * scale  # y from row
        point_labels = np.asarray(labels, dtype=np.float32)[None]
        try:
            logits, scores = decoder.run(
                None,
                {
                    "image_embeddings": emb.payload.astype(np.float32),
                    "point_coords": coords,
                    "point_labels": point_labels,
                },
            )
        except Exception as e:
            raise BackendError(f"decoder inference failed: {e}") from e
        logits = np.asarray(logits)[0]
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        new_h, new_w = round(h * scale), round(w * scale)
        masks = []
        for candidate in logits:
            full = _bilinear_resize(candidate, self.input_size, self.input_size)
            cropped = full[:new_h, :new_w]
            patch_logits = _bilinear_resize(cropped, h, w)
            masks.append(patch_logits > 0.0)
        return masks, [float(s) for s in scores]


# ---------------------------------------------------------------------------
# prediction driver
# ---------------------------------------------------------------------------

def predict(
    backend: SegmenterBackend,
    emb: ImageEmbedding,
    prompts: PromptSet,
    joint_decode: bool = False,
) -> SegmentationResult:
    """Decode prompts against an embedding and aggregate to one binary mask.

    Default behavior decodes once per foreground prompt (plus all
    background points when the backend supports them), keeps the
    highest-quality candidate of each decode, and unions the winners.
    ``joint_decode`` instead issues a single decode with every point.
    """
    h, w = emb.source_hw
    fg = prompts.foreground()
    bg = prompts.background() if backend.capabilities.supports_negative_prompts else []
    if not fg:
        raise DataError("prediction requires at least one foreground prompt")
    for row, col in fg + bg:
        if not (0 <= row < h and 0 <= col < w):
            raise DataError(f"prompt ({row}, {col}) outside the {h}x{w} image")

    def best_candidate(points, labels):
        masks, qualities = backend.decode(
            emb, np.asarray(points, dtype=np.float64), np.asarray(labels, dtype=np.int64)
        )
        idx = int(np.argmax(qualities))
        return masks[idx], float(qualities[idx])

    if joint_decode:
        points = list(fg) + list(bg)
        labels = [1] * len(fg) + [0] * len(bg)
        mask, quality = best_candidate(points, labels)
        return SegmentationResult(mask=mask.astype(bool), quality=(quality,), chosen_candidate=0)

    union = np.zeros((h, w), dtype=bool)
    qualities = []
    for point in fg:
        points = [point] + list(bg)
        labels = [1] + [0] * len(bg)
        mask, quality = best_candidate(points, labels)
        union |= mask.astype(bool)
        qualities.append(quality)
    return SegmentationResult(
        mask=union,
        quality=tuple(qualities),
        chosen_candidate=int(np.argmax(qualities)),
    )


# ---------------------------------------------------------------------------
# embedding cache
# ---------------------------------------------------------------------------

class _Slot:
    __slots__ = ("event", "value", "error")

    def __init__(self):
        self.event = threading.Event()
        self.value = None
        self.error = None


class EmbeddingCache:
    """Thread-safe LRU cache of image embeddings with single-flight computes.

    Concurrent first accesses of one key trigger exactly one embed call;
    errors propagate to every waiter and are never cached.
    """

    def __init__(self, capacity: int = 128):
        if capacity < 1:
            raise DataError(f"cache capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._lock = threading.Lock()
        self._slots: OrderedDict = OrderedDict()
        self.hits = 0
        self.misses = 0

    def get_or_compute(
        self, backend: SegmenterBackend, rendered: RenderedVisualization
    ) -> ImageEmbedding:
        if not backend.capabilities.embedding_cacheable:
            with self._lock:
                self.misses += 1
            return backend.embed(rendered)
        key = (backend.backend_id, rendered.patch_id, rendered.viz_expr)
        with self._lock:
            slot = self._slots.get(key)
            if slot is None:
                slot = _Slot()
                self._slots[key] = slot
                self.misses += 1
                owner = True
            else:
                self._slots.move_to_end(key)
                self.hits += 1
                owner = False

        if not owner:
            slot.event.wait()
            if slot.error is not None:
                raise slot.error
            return slot.value

        try:
            value = backend.embed(rendered)
        except BaseException as e:
            with self._lock:
                if self._slots.get(key) is slot:
                    del self._slots[key]
            slot.error = e
            slot.event.set()
            raise
        slot.value = value
        slot.event.set()
        with self._lock:
            self._evict()
        return value

    def _evict(self) -> None:
        # Under the lock. In-flight slots are skipped so waiters never lose
        # their computation; they age out once completed.
        while len(self._slots) > self.capacity:
            for key, slot in self._slots.items():
                if slot.event.is_set():
                    del self._slots[key]
                    break
            else:
                return

    def __len__(self):
        with self._lock:
            return len(self._slots)


def embedding_cache_get_or_compute(
    cache: EmbeddingCache, backend: SegmenterBackend, rendered: RenderedVisualization
) -> ImageEmbedding:
    """Fetch the embedding for (backend, patch, viz), computing it at most once."""
    return cache.get_or_compute(backend, rendered)
