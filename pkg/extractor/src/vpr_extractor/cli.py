"""Command line entry point: images in, interchange files out."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, WeightsError
from .extraction import FACETS, ExtractConfig, extract, extract_cls
from .models import MODEL_REGISTRY, WEIGHTS_ENV, load_backbone

log = logging.getLogger("vpr_extractor")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vpr-extract",
        description=(
            "Export dense ViT facet features (.anyf + manifest stub) and/or "
            "CLS embeddings (.anyd) for the retrieval toolkit. Weights are "
            f"cached under ${WEIGHTS_ENV} when set."
        ),
    )
    parser.add_argument("images", nargs="*", help="image files, any PIL-decodable format")
    parser.add_argument("--model", required=True, choices=sorted(MODEL_REGISTRY))
    parser.add_argument("--layer", type=int, default=31, help="block index, 0-based")
    parser.add_argument("--facet", default="value", choices=list(FACETS))
    parser.add_argument(
        "--resize", type=int, nargs=2, metavar=("H", "W"),
        help="exact input size; default scales the shorter side to 224 "
             "and center-crops to patch multiples",
    )
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--out", help="directory for .anyf maps + manifest stub")
    parser.add_argument("--cls-out", help="file for the CLS descriptor set")
    parser.add_argument(
        "--log-level", default="info", choices=["debug", "info", "warning", "error"]
    )
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()), stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if not args.out and not args.cls_out:
        print("error: nothing to do, pass --out and/or --cls-out", file=sys.stderr)
        return 2
    try:
        cfg = ExtractConfig(
            model=args.model,
            layer=args.layer,
            facet=args.facet,
            resize=tuple(args.resize) if args.resize else None,
            device=args.device,
            batch_size=args.batch_size,
        )
        model = None
        if args.images:
            model = load_backbone(cfg.spec, cfg.device)
        skipped: set[str] = set()
        if args.out:
            report = extract(args.images, cfg, args.out, model=model)
            skipped.update(report.skipped)
            log.info("wrote %d feature maps to %s", len(report.written), args.out)
        if args.cls_out:
            report = extract_cls(args.images, cfg, args.cls_out, model=model)
            skipped.update(report.skipped)
            log.info("wrote %d cls vectors to %s", len(report.written), args.cls_out)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (WeightsError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    if skipped:
        print(
            f"error: skipped {len(skipped)} undecodable image(s): "
            + ", ".join(sorted(skipped)),
            file=sys.stderr,
        )
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
