"""Convert the digit JSON files of the ``mnist`` npm package into gzipped IDX files.

The package ships 10,000 real MNIST digits (863 to 1,127 per class) as ``digits/<k>.json``
holding ``{"data": [...]}`` with 784 values per image in [0, 1], rounded to three
decimals.  ``round(v * 255)`` recovers the original bytes.

    python scripts/make_mnist_subset.py path/to/package/src/digits data/
"""

import argparse
import json
from pathlib import Path

import numpy as np

from csrobust.data import write_idx_images, write_idx_labels


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args(argv)
    images, labels = [], []
    for k in range(10):
        flat = np.array(json.loads((args.digits_dir / f"{k}.json").read_text())["data"])
        if flat.size % 784:
            raise SystemExit(f"{k}.json: {flat.size} values is not a multiple of 784")
        px = np.rint(flat * 255).astype(np.uint8).reshape(-1, 784)
        images.append(px)
        labels.append(np.full(len(px), k, dtype=np.uint8))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx_images(args.out_dir / "mnist-npm-images-idx3-ubyte.gz", np.concatenate(images))
    write_idx_labels(args.out_dir / "mnist-npm-labels-idx1-ubyte.gz", np.concatenate(labels))
    print(f"wrote {sum(len(p) for p in images)} digits to {args.out_dir}")


if __name__ == "__main__":
    main()
