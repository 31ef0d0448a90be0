import importlib.util
import json

import numpy as np
import pytest

from samexport import (
    ExportError,
    ExportManifest,
    export_model,
    mask_iou,
    model_metadata,
    parity_check,
    sha256_file,
    verify_checkpoint,
    write_metadata,
)

HAS_TORCH = importlib.util.find_spec("torch") is not None
HAS_ONNX = importlib.util.find_spec("onnx") is not None
HAS_SAM = importlib.util.find_spec("segment_anything") is not None


class TestManifest:
    def test_known_variants(self, tmp_path):
        for variant in ("vit-b", "vit-l", "vit-h"):
            manifest = ExportManifest(variant=variant, checkpoint="x.pth", out_dir=str(tmp_path))
            assert manifest.encoder_path.name == "encoder.onnx"
            assert manifest.decoder_path.name == "decoder.onnx"
            assert manifest.metadata_path.name == "metadata.json"

    def test_unknown_variant(self, tmp_path):
        with pytest.raises(ExportError, match="vit-x"):
            ExportManifest(variant="vit-x", checkpoint="x.pth", out_dir=str(tmp_path))

    def test_missing_checkpoint(self, tmp_path):
        manifest = ExportManifest(
            variant="vit-b", checkpoint=str(tmp_path / "missing.pth"), out_dir=str(tmp_path)
        )
        with pytest.raises(ExportError, match="not found"):
            verify_checkpoint(manifest)

    def test_checkpoint_hash_mismatch(self, tmp_path):
        path = tmp_path / "ckpt.pth"
        path.write_bytes(b"weights")
        manifest = ExportManifest(
            variant="vit-b",
            checkpoint=str(path),
            out_dir=str(tmp_path),
            checkpoint_sha256="0" * 64,
        )
        with pytest.raises(ExportError, match="hash mismatch"):
            verify_checkpoint(manifest)

    def test_checkpoint_hash_match(self, tmp_path):
        path = tmp_path / "ckpt.pth"
        path.write_bytes(b"weights")
        manifest = ExportManifest(
            variant="vit-b",
            checkpoint=str(path),
            out_dir=str(tmp_path),
            checkpoint_sha256=sha256_file(path),
        )
        assert verify_checkpoint(manifest) == path


class TestMetadata:
    def test_write_is_deterministic(self, tmp_path):
        metadata = {
            "input_size": 1024,
            "pixel_mean": [123.675, 116.28, 103.53],
            "pixel_std": [58.395, 57.12, 57.375],
            "embedding_shape": [1, 256, 64, 64],
        }
        write_metadata(metadata, tmp_path / "a.json")
        write_metadata(dict(reversed(list(metadata.items()))), tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        parsed = json.loads((tmp_path / "a.json").read_text())
        assert parsed == metadata

    @pytest.mark.skipif(not HAS_TORCH, reason="torch not installed")
    def test_metadata_read_from_model(self):
        import torch
        from torch import nn

        class TinyEncoder(nn.Module):
            img_size = 32

            def forward(self, x):
                # (1, 3, 32, 32) -> (1, 8, 4, 4), mirrors SAM's 16x reduction
                return x.reshape(1, 3, 8, 4, 8, 4).mean(dim=(2, 4)).repeat(1, 8 // 3 + 1, 1, 1)[:, :8]

        class TinySam(nn.Module):
            def __init__(self):
                super().__init__()
                self.image_encoder = TinyEncoder()
                self.register_buffer("pixel_mean", torch.tensor([1.0, 2.0, 3.0]).view(3, 1, 1))
                self.register_buffer("pixel_std", torch.tensor([4.0, 5.0, 6.0]).view(3, 1, 1))

        metadata = model_metadata(TinySam())
        assert metadata["input_size"] == 32
        assert metadata["pixel_mean"] == [1.0, 2.0, 3.0]
        assert metadata["pixel_std"] == [4.0, 5.0, 6.0]
        assert metadata["embedding_shape"] == [1, 8, 4, 4]

        # identical model -> identical metadata (re-export determinism)
        assert model_metadata(TinySam()) == metadata


class TestExportErrors:
    @pytest.mark.skipif(HAS_SAM, reason="segment_anything installed; error path not reachable")
    def test_export_requires_segment_anything(self, tmp_path):
        ckpt = tmp_path / "ckpt.pth"
        ckpt.write_bytes(b"x")
        manifest = ExportManifest(variant="vit-b", checkpoint=str(ckpt), out_dir=str(tmp_path))
        with pytest.raises(ExportError, match="segment_anything|onnx"):
            export_model(manifest)


class TestMaskIou:
    def test_identical(self):
        mask = np.zeros((8, 8), bool)
        mask[2:5, 2:5] = True
        assert mask_iou(mask, mask) == 1.0

    def test_both_empty(self):
        empty = np.zeros((4, 4), bool)
        assert mask_iou(empty, empty) == 1.0

    def test_partial(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, :2] = True
        b[0, :4] = True
        assert mask_iou(a, b) == 0.5


class TestParityCheck:
    def manifest(self, tmp_path):
        return ExportManifest(variant="vit-b", checkpoint="ckpt.pth", out_dir=str(tmp_path))

    def fake_image(self):
        return np.zeros((16, 16, 3), np.uint8)

    def test_report_structure_with_injected_runners(self, tmp_path):
        mask = np.zeros((16, 16), bool)
        mask[4:10, 4:10] = True
        near = mask.copy()
        near[4, 4] = False

        def reference_fn(image, point):
            return mask, np.array([0.9, 0.5, 0.2])

        def onnx_fn(image, point):
            return near, np.array([0.88, 0.5, 0.2])

        report = parity_check(
            self.manifest(tmp_path), self.fake_image(), (6, 6), reference_fn, onnx_fn
        )
        assert report["failures"] == []
        assert report["mask_iou"] == pytest.approx(35 / 36)
        assert report["score_max_abs_diff"] == pytest.approx(0.02)

    def test_identical_runs_identical_reports(self, tmp_path):
        mask = np.ones((8, 8), bool)

        def fn(image, point):
            return mask, np.array([0.7, 0.6, 0.1])

        a = parity_check(self.manifest(tmp_path), self.fake_image(), (2, 2), fn, fn)
        b = parity_check(self.manifest(tmp_path), self.fake_image(), (2, 2), fn, fn)
        assert a == b
        assert a["mask_iou"] == 1.0
        assert a["score_max_abs_diff"] == 0.0

    def test_load_failure_recorded_not_raised(self, tmp_path):
        def reference_fn(image, point):
            return np.ones((8, 8), bool), np.array([0.9])

        def broken_onnx_fn(image, point):
            raise RuntimeError("corrupted decoder file")

        report = parity_check(
            self.manifest(tmp_path), self.fake_image(), (2, 2), reference_fn, broken_onnx_fn
        )
        assert any("corrupted decoder" in f for f in report["failures"])
        assert "mask_iou" not in report


@pytest.mark.skipif(
    not (HAS_TORCH and HAS_ONNX and HAS_SAM),
    reason="full export needs torch + onnx + segment_anything and a checkpoint",
)
class TestFullExport:
    def test_vit_b_export_and_parity(self, tmp_path):
        import os

        checkpoint = os.environ.get("SAM_VIT_B_CHECKPOINT")
        if not checkpoint:
            pytest.skip("set SAM_VIT_B_CHECKPOINT to run the full export")
        manifest = ExportManifest(variant="vit-b", checkpoint=checkpoint, out_dir=str(tmp_path))
        metadata = export_model(manifest)
        assert manifest.encoder_path.exists() and manifest.decoder_path.exists()
        assert metadata["embedding_shape"][1] == 256
        rng = np.random.default_rng(0)
        image = (rng.uniform(0, 255, (128, 128, 3))).astype(np.uint8)
        report = parity_check(manifest, image, (64, 64))
        assert report["failures"] == []
        assert report["mask_iou"] >= 0.95
        assert report["score_max_abs_diff"] <= 0.05
