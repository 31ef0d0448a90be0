"""samexport: convert Segment Anything checkpoints to a two-graph ONNX contract."""

from .export import (
    DECODER_FILE,
    ENCODER_FILE,
    METADATA_FILE,
    VARIANTS,
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

__version__ = "0.1.0"
