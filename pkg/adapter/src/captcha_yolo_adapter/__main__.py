"""Command-line entry: all configuration comes from flags."""

import argparse
import sys

from .adapter import AdapterConfig, parse_class_names, serve


def main() -> None:
    ap = argparse.ArgumentParser(
        prog="captcha-yolo-adapter",
        description="Serve a CAPTCHA detector over newline-delimited JSON stdio",
    )
    ap.add_argument("--weights", required=True,
                    help="model weights path, or 'stub' to answer from label files")
    ap.add_argument("--input-size", type=int, default=640,
                    help="model input size, e.g. 320 or 640 (default 640)")
    ap.add_argument("--conf-floor", type=float, default=0.25,
                    help="drop detections below this confidence (default 0.25)")
    ap.add_argument("--device", default="cpu", help="inference device (default cpu)")
    ap.add_argument("--stub-labels",
                    help="label-file directory for --weights stub")
    ap.add_argument("--class-names",
                    help="override the model's index->name table, "
                         "e.g. 0=text,1=puzzle,2=image,3=button")
    args = ap.parse_args()

    try:
        cfg = AdapterConfig(
            weights=args.weights,
            input_size=args.input_size,
            conf_floor=args.conf_floor,
            device=args.device,
            stub_labels=args.stub_labels,
            class_names=parse_class_names(args.class_names) if args.class_names else {},
        )
    except ValueError as exc:
        print(f"adapter: {exc}", file=sys.stderr)
        sys.exit(1)
    sys.exit(serve(cfg))


if __name__ == "__main__":
    main()
