"""Rebuild data/mnist01 from the digit JSON files of the npm ``mnist`` package.

That package ships 10,000 MNIST digits as pixel values rounded to three
decimals; ``round(v * 255)`` recovers the original bytes exactly. Only the
digits 0 and 1 are kept.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python scripts/build_mnist01.py package/src/digits data/mnist01
"""

import json
import sys
from pathlib import Path

import numpy as np

from dgkip.data import write_idx


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    images, labels = [], []
    for digit in (0, 1):
        flat = np.array(json.loads((src / f"{digit}.json").read_text())["data"])
        pix = np.round(flat * 255.0)
        assert np.all(np.abs(pix - flat * 255.0) < 0.2), "pixel recovery failed"
        images.append(pix.reshape(-1, 28, 28).astype(np.uint8))
        labels.append(np.full(images[-1].shape[0], digit, dtype=np.uint8))
    write_idx(dst / "images-idx3-ubyte.gz", np.concatenate(images))
    write_idx(dst / "labels-idx1-ubyte.gz", np.concatenate(labels))
    print(f"wrote {sum(len(l) for l in labels)} digits to {dst}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
