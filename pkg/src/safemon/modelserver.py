"""Serve a saved built-in model over the external inference protocol.

Usage: python -m safemon.modelserver <model.mfm>

Lets the pipeline (or a conformance harness) exercise the external-provider
path against a model whose direct predictions are known.
"""

from __future__ import annotations

import argparse
import base64
import json
import sys

import numpy as np

from .component import load_model_file
from .imageio import dequantize


def serve(model_path: str, stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    model = load_model_file(model_path)
    stdout.write(json.dumps(
        {"type": "hello", "classes": model.k, "name": f"builtin:{model_path}"},
        separators=(",", ":"),
    ) + "\n")
    stdout.flush()
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
            w, h = int(req["width"]), int(req["height"])
            raw = base64.b64decode(req["pixels"], validate=True)
            if len(raw) != w * h * 3:
                raise ValueError(f"expected {w * h * 3} pixel bytes, got {len(raw)}")
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            print(f"malformed request: {exc}", file=sys.stderr)
            return 2
        pixels = dequantize(np.frombuffer(raw, dtype=np.uint8)).reshape(h, w, 3)
        probs = model.predict_proba(pixels[None])[0]
        stdout.write(json.dumps(
            {"id": req["id"], "probs": [float(p) for p in probs]},
            separators=(",", ":"),
        ) + "\n")
        stdout.flush()
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("model", help="path to a .mfm model file")
    args = parser.parse_args(argv)
    return serve(args.model)


if __name__ == "__main__":
    sys.exit(main())
