import argparse
import sys

import uvicorn

from .app import build_scorer, create_app


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="clipserve",
                                     description="Serve image-text style gradients.")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8421)
    parser.add_argument("--model", default="openai/clip-vit-base-patch32",
                        help="model name or local path")
    parser.add_argument("--model-hash", default=None,
                        help="refuse to start unless the loaded weights hash to this value")
    parser.add_argument("--fake", action="store_true",
                        help="serve the deterministic offline scorer instead of the model")
    args = parser.parse_args(argv)

    try:
        scorer = build_scorer(args.model, args.fake, args.model_hash)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    uvicorn.run(create_app(scorer), host=args.host, port=args.port, log_level="info")
    return 0


if __name__ == "__main__":
    sys.exit(main())
