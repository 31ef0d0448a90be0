"""samexport command line: export checkpoints, check export parity."""

from __future__ import annotations

import argparse
import json
import sys

from .export import ExportManifest, ExportError, export_model, parity_check


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="samexport",
        description="Convert Segment Anything checkpoints to the ONNX encoder/decoder pair.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_export = sub.add_parser("export", help="export encoder.onnx, decoder.onnx, metadata.json")
    p_export.add_argument("--variant", required=True, choices=["vit-b", "vit-l", "vit-h"])
    p_export.add_argument("--checkpoint", required=True, help="source .pth checkpoint path")
    p_export.add_argument("--out", required=True, help="output directory")
    p_export.add_argument("--opset", type=int, default=17)
    p_export.add_argument("--sha256", help="expected checkpoint digest (verified when given)")

    p_parity = sub.add_parser("parity", help="compare exported graphs against the source model")
    p_parity.add_argument("--variant", required=True, choices=["vit-b", "vit-l", "vit-h"])
    p_parity.add_argument("--checkpoint", required=True)
    p_parity.add_argument("--out", required=True, help="directory holding the exported files")
    p_parity.add_argument("--image", required=True, help="RGB test image (PNG)")
    p_parity.add_argument("--point", default="64,64", help="prompt as row,col (default 64,64)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = ExportManifest(
            variant=args.variant,
            checkpoint=args.checkpoint,
            out_dir=args.out,
            opset=getattr(args, "opset", 17),
            checkpoint_sha256=getattr(args, "sha256", None),
        )
        if args.command == "export":
            metadata = export_model(manifest)
            print(json.dumps(metadata, indent=2, sort_keys=True))
            return 0
        import numpy as np
        from PIL import Image

        image = np.asarray(Image.open(args.image).convert("RGB"))
        row, col = (int(v) for v in args.point.split(","))
        report = parity_check(manifest, image, (row, col))
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0 if not report["failures"] else 1
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
