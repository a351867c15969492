#!/usr/bin/env python3
"""Write scikit-learn's 8x8 handwritten digits into the dataset ingestion format."""

import argparse
import hashlib
import json
import pathlib

import numpy as np
from sklearn.datasets import load_digits


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data" / "digits"))
    args = parser.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    digits = load_digits()
    pixels = np.rint(digits.images * (255.0 / 16.0)).astype(np.uint8)  # [N, 8, 8]
    labels = digits.target.astype("<i4")

    image_bytes = pixels.reshape(len(pixels), 1, 8, 8).tobytes()
    label_bytes = labels.tobytes()
    (out / "all_images.u8").write_bytes(image_bytes)
    (out / "all_labels.i32").write_bytes(label_bytes)

    manifest = {
        "version": 1,
        "name": "digits",
        "image_shape": [1, 8, 8],
        "dtype": "uint8",
        "classes": [str(c) for c in range(10)],
        "splits": {
            "all": {
                "images": "all_images.u8",
                "labels": "all_labels.i32",
                "count": int(len(labels)),
                "images_sha256": hashlib.sha256(image_bytes).hexdigest(),
                "labels_sha256": hashlib.sha256(label_bytes).hexdigest(),
            }
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(labels)} images to {out}")


if __name__ == "__main__":
    main()
