"""Write the 5000-digit MNIST sample bundled with mlxtend as an IDX file pair.

    python scripts/mnist_to_idx.py data/mnist5k

produces ``data/mnist5k/images.idx`` and ``data/mnist5k/labels.idx``, which
``infinet`` reads with ``data.source = idx``.
"""

import argparse
from pathlib import Path

import numpy as np

from infinet.data import write_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    args = ap.parse_args()
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(x.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.uint8), out / "images.idx", out / "labels.idx")
    print(f"wrote {len(y)} images to {out}")


if __name__ == "__main__":
    main()
