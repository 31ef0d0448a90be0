"""Export Segment Anything checkpoints to the two-graph ONNX contract.

The consuming engine expects, per encoder variant, a directory with:

* ``encoder.onnx``: standardized (input_size, input_size) 3-channel image
  -> image embedding;
* ``decoder.onnx``: (image_embeddings, point_coords, point_labels) ->
  3 candidate mask logits (256x256) plus 3 quality scores, accepting
  variable point counts without re-export;
* ``metadata.json``: {input_size, pixel_mean, pixel_std, embedding_shape},
  every value read from the loaded model, never hand-entered.

Keeping encoder and decoder as separate graphs is what lets the engine
cache one embedding per image and decode many prompts against it.

Heavy dependencies (torch, onnx, segment_anything, onnxruntime) import
lazily so manifest handling and validation work without them.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

VARIANTS = {
    "vit-b": "vit_b",
    "vit-l": "vit_l",
    "vit-h": "vit_h",
}

ENCODER_FILE = "encoder.onnx"
DECODER_FILE = "decoder.onnx"
METADATA_FILE = "metadata.json"

# Score (IoU-prediction) outputs use this many candidates in every variant.
NUM_CANDIDATES = 3


class ExportError(Exception):
    """Raised for unusable manifests, missing checkpoints, or export failures."""


@dataclass(frozen=True)
class ExportManifest:
    variant: str
    checkpoint: str
    out_dir: str
    opset: int = 17
    checkpoint_sha256: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ExportError(
                f"unknown encoder variant {self.variant!r}; expected one of {sorted(VARIANTS)}"
            )

    @property
    def encoder_path(self) -> Path:
        return Path(self.out_dir) / ENCODER_FILE

    @property
    def decoder_path(self) -> Path:
        return Path(self.out_dir) / DECODER_FILE

    @property
    def metadata_path(self) -> Path:
        return Path(self.out_dir) / METADATA_FILE


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def verify_checkpoint(manifest: ExportManifest) -> Path:
    path = Path(manifest.checkpoint)
    if not path.exists():
        raise ExportError(f"checkpoint not found: {path}")
    if manifest.checkpoint_sha256:
        actual = sha256_file(path)
        if actual != manifest.checkpoint_sha256.lower():
            raise ExportError(
                f"checkpoint hash mismatch: expected {manifest.checkpoint_sha256}, got {actual}"
            )
    return path


def _load_sam(manifest: ExportManifest):
    try:
        from segment_anything import sam_model_registry
    except ImportError as e:
        raise ExportError(
            "segment_anything is required to load checkpoints "
            "(pip install samexport[export])"
        ) from e
    checkpoint = verify_checkpoint(manifest)
    sam = sam_model_registry[VARIANTS[manifest.variant]](checkpoint=str(checkpoint))
    sam.eval()
    return sam


def model_metadata(sam) -> dict:
    """Read the preprocessing contract off the loaded model.

    The embedding shape comes from one forward pass of the image encoder,
    so it reflects the graph that is actually exported.
    """
    import torch

    input_size = int(sam.image_encoder.img_size)
    pixel_mean = [float(v) for v in sam.pixel_mean.reshape(-1).tolist()]
    pixel_std = [float(v) for v in sam.pixel_std.reshape(-1).tolist()]
    with torch.no_grad():
        probe = torch.zeros(1, 3, input_size, input_size)
        embedding = sam.image_encoder(probe)
    return {
        "input_size": input_size,
        "pixel_mean": pixel_mean,
        "pixel_std": pixel_std,
        "embedding_shape": [int(d) for d in embedding.shape],
    }


def write_metadata(metadata: dict, path: str | Path) -> None:
    # Stable key order keeps re-exports byte-identical.
    path = Path(path)
    path.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _build_decoder_wrapper(sam):
    """Wrap prompt encoder + mask decoder into the 3-input decoder graph.

    Inputs: image_embeddings (1,C,H,W), point_coords (1,N,2) in encoder
    input pixel space (x, y), point_labels (1,N) with 1 foreground /
    0 background. Outputs: mask logits (1,3,256,256), scores (1,3).
    """
    import torch
    from torch import nn

    class DecoderWrapper(nn.Module):
        def __init__(self, model):
            super().__init__()
            self.prompt_encoder = model.prompt_encoder
            self.mask_decoder = model.mask_decoder
            self.img_size = model.image_encoder.img_size

        def _embed_points(self, point_coords, point_labels):
            point_coords = point_coords + 0.5
            point_coords = point_coords / self.img_size
            embedding = self.prompt_encoder.pe_layer._pe_encoding(point_coords)
            point_labels = point_labels.unsqueeze(-1)
            embedding = embedding * (point_labels != -1)
            embedding = embedding + self.prompt_encoder.not_a_point_embed.weight * (
                point_labels == -1
            )
            embedding = embedding + self.prompt_encoder.point_embeddings[0].weight * (
                point_labels == 0
            )
            embedding = embedding + self.prompt_encoder.point_embeddings[1].weight * (
                point_labels == 1
            )
            return embedding

        def forward(self, image_embeddings, point_coords, point_labels):
            sparse = self._embed_points(point_coords, point_labels)
            dense = self.prompt_encoder.no_mask_embed.weight.reshape(1, -1, 1, 1).expand(
                point_coords.shape[0],
                -1,
                image_embeddings.shape[2],
                image_embeddings.shape[3],
            )
            masks, scores = self.mask_decoder.predict_masks(
                image_embeddings=image_embeddings,
                image_pe=self.prompt_encoder.get_dense_pe(),
                sparse_prompt_embeddings=sparse,
                dense_prompt_embeddings=dense,
            )
            # Drop the single-mask output; keep the three multimask candidates.
            return masks[:, 1:, :, :], scores[:, 1:]

    return DecoderWrapper(sam)


def export_model(manifest: ExportManifest) -> dict:
    """Export encoder.onnx, decoder.onnx, and metadata.json for one variant.

    Returns the metadata dict. Idempotent: re-exporting the same checkpoint
    rewrites identical metadata.
    """
    import torch

    try:
        import onnx  # noqa: F401  (torch.onnx.export serialization backend)
    except ImportError as e:
        raise ExportError(
            "the onnx package is required for graph export (pip install samexport[export])"
        ) from e

    sam = _load_sam(manifest)
    out_dir = Path(manifest.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metadata = model_metadata(sam)
    input_size = metadata["input_size"]

    image = torch.zeros(1, 3, input_size, input_size)
    torch.onnx.export(
        sam.image_encoder,
        (image,),
        str(manifest.encoder_path),
        input_names=["image"],
        output_names=["image_embeddings"],
        opset_version=manifest.opset,
        dynamo=False,
    )

    decoder = _build_decoder_wrapper(sam)
    embedding = torch.zeros(*metadata["embedding_shape"])
    coords = torch.zeros(1, 2, 2)
    labels = torch.zeros(1, 2)
    torch.onnx.export(
        decoder,
        (embedding, coords, labels),
        str(manifest.decoder_path),
        input_names=["image_embeddings", "point_coords", "point_labels"],
        output_names=["masks", "iou_predictions"],
        dynamic_axes={
            "point_coords": {1: "num_points"},
            "point_labels": {1: "num_points"},
        },
        opset_version=manifest.opset,
        dynamo=False,
    )

    for path in (manifest.encoder_path, manifest.decoder_path):
        graph = onnx.load(str(path))
        onnx.checker.check_model(graph)

    write_metadata(metadata, manifest.metadata_path)
    logger.info("exported %s to %s", manifest.variant, out_dir)
    return metadata


# ---------------------------------------------------------------------------
# parity check
# ---------------------------------------------------------------------------

def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def _reference_predict(sam, image: np.ndarray, point: tuple[int, int]):
    """Reference mask via the source model's own predictor utilities."""
    import torch
    from segment_anything import SamPredictor

    predictor = SamPredictor(sam)
    predictor.set_image(image)
    coords = np.array([[point[1], point[0]]], dtype=np.float32)
    labels = np.ones(1, dtype=np.int64)
    masks, scores, _ = predictor.predict(
        point_coords=coords, point_labels=labels, multimask_output=True
    )
    best = int(np.argmax(scores))
    return masks[best], np.asarray(scores, dtype=np.float64)


def _onnx_predict(manifest: ExportManifest, image: np.ndarray, point: tuple[int, int]):
    """Exported-graph mask via onnxruntime plus the engine-side pre/postprocessing."""
    import onnxruntime
    from scipy import ndimage

    with open(manifest.metadata_path, encoding="utf-8") as f:
        meta = json.load(f)
    input_size = meta["input_size"]
    mean = np.asarray(meta["pixel_mean"], np.float32).reshape(3, 1, 1)
    std = np.asarray(meta["pixel_std"], np.float32).reshape(3, 1, 1)

    h, w = image.shape[:2]
    scale = input_size / max(h, w)
    new_h, new_w = round(h * scale), round(w * scale)
    chw = np.moveaxis(image.astype(np.float32), 2, 0)
    resized = ndimage.zoom(chw, (1.0, new_h / h, new_w / w), order=1, grid_mode=True, mode="nearest")
    padded = np.zeros((3, input_size, input_size), np.float32)
    padded[:, :new_h, :new_w] = (resized - mean) / std

    encoder = onnxruntime.InferenceSession(str(manifest.encoder_path))
    decoder = onnxruntime.InferenceSession(str(manifest.decoder_path))
    (embedding,) = encoder.run(None, {"image": padded[None]})
    coords = np.array([[[(point[1] + 0.5) * scale, (point[0] + 0.5) * scale]]], np.float32)
    labels = np.ones((1, 1), np.float32)
    logits, scores = decoder.run(
        None,
        {"image_embeddings": embedding, "point_coords": coords, "point_labels": labels},
    )
    scores = np.asarray(scores, np.float64).reshape(-1)
    best = int(np.argmax(scores))
    candidate = np.asarray(logits)[0, best]
    full = ndimage.zoom(
        candidate,
        (input_size / candidate.shape[0], input_size / candidate.shape[1]),
        order=1,
        grid_mode=True,
        mode="nearest",
    )
    patch_logits = ndimage.zoom(
        full[:new_h, :new_w], (h / new_h, w / new_w), order=1, grid_mode=True, mode="nearest"
    )
    return patch_logits > 0.0, scores


def parity_check(
    manifest: ExportManifest,
    test_image: np.ndarray,
    point: tuple[int, int],
    reference_fn=None,
    onnx_fn=None,
) -> dict:
    """Compare the exported graphs against the source model on one image + prompt.

    Returns a report dict; failures are recorded in the report rather than
    raised. The inference callables are injectable for testing.
    """
    report: dict = {
        "variant": manifest.variant,
        "encoder": str(manifest.encoder_path),
        "decoder": str(manifest.decoder_path),
        "failures": [],
    }

    if reference_fn is None:
        def reference_fn(image, pt):
            return _reference_predict(_load_sam(manifest), image, pt)

    if onnx_fn is None:
        def onnx_fn(image, pt):
            return _onnx_predict(manifest, image, pt)

    try:
        ref_mask, ref_scores = reference_fn(test_image, point)
    except Exception as e:
        report["failures"].append(f"reference inference failed: {e}")
        return report
    try:
        onnx_mask, onnx_scores = onnx_fn(test_image, point)
    except Exception as e:
        report["failures"].append(f"exported-graph inference failed: {e}")
        return report

    report["mask_iou"] = mask_iou(ref_mask, onnx_mask)
    n = min(len(ref_scores), len(onnx_scores))
    report["score_max_abs_diff"] = float(np.abs(ref_scores[:n] - onnx_scores[:n]).max())
    return report
