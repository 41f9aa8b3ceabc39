#!/usr/bin/env python3
"""Fetch MNIST into data/ as standard IDX files.

Tries the canonical mirrors first.  If none are reachable (common in
sandboxed environments), falls back to the npm package ``mnist``, which
bundles ~10k genuine MNIST digits as JSON; those are converted back to
uint8 pixels and split into a deterministic, class-stratified train/test
pair.  Either way the output is the same four IDX files the loaders
expect, so downstream code never cares where the bytes came from.
"""

import argparse
import gzip
import json
import shutil
import subprocess
import sys
import tempfile
import urllib.request
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))
from epconv.data import save_idx_images, save_idx_labels  # noqa: E402

MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "http://yann.lecun.com/exdb/mnist/",
)
FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)
SPLIT_SEED = 20240601  # fixed: the fallback split must be identical everywhere


def fetch_canonical(out_dir: Path) -> bool:
    for mirror in MIRRORS:
        try:
            got = []
            for name in FILES:
                print(f"  {mirror}{name} ...", flush=True)
                with urllib.request.urlopen(mirror + name, timeout=15) as r:
                    got.append((name, r.read()))
            for name, blob in got:
                (out_dir / name.removesuffix(".gz")).write_bytes(gzip.decompress(blob))
            return True
        except OSError as e:
            print(f"  mirror failed: {e}")
    return False


def fetch_npm_bundle(out_dir: Path) -> bool:
    """Rebuild IDX files from the npm ``mnist`` package's JSON digits."""
    if shutil.which("npm") is None:
        print("  npm not available")
        return False
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        try:
            subprocess.run(
                ["npm", "pack", "mnist", "--pack-destination", str(tmp)],
                check=True, capture_output=True, timeout=300,
            )
        except (subprocess.CalledProcessError, subprocess.TimeoutExpired) as e:
            print(f"  npm pack failed: {e}")
            return False
        tarball = next(tmp.glob("mnist-*.tgz"))
        subprocess.run(["tar", "xzf", str(tarball), "-C", str(tmp)], check=True)
        digit_dir = tmp / "package" / "src" / "digits"
        per_class = {}
        for c in range(10):
            blob = json.loads((digit_dir / f"{c}.json").read_text())
            arr = np.asarray(blob["data"], dtype=np.float64)
            # pixels are x/255 rounded to 3 decimals; recover exact bytes
            per_class[c] = np.rint(arr * 255.0).astype(np.uint8).reshape(-1, 28, 28)
            print(f"  class {c}: {len(per_class[c])} images")

    rng = np.random.default_rng(SPLIT_SEED)
    train_x, train_y, test_x, test_y = [], [], [], []
    for c in range(10):
        imgs = per_class[c]
        cut = (len(imgs) + 1) // 2
        train_x.append(imgs[:cut])
        train_y.append(np.full(cut, c, dtype=np.uint8))
        test_x.append(imgs[cut:])
        test_y.append(np.full(len(imgs) - cut, c, dtype=np.uint8))

    def pack(xs, ys):
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        order = rng.permutation(len(x))
        return x[order], y[order]

    tr_x, tr_y = pack(train_x, train_y)
    te_x, te_y = pack(test_x, test_y)
    save_idx_images(out_dir / "train-images-idx3-ubyte", tr_x)
    save_idx_labels(out_dir / "train-labels-idx1-ubyte", tr_y)
    save_idx_images(out_dir / "t10k-images-idx3-ubyte", te_x)
    save_idx_labels(out_dir / "t10k-labels-idx1-ubyte", te_y)
    print(f"  wrote {len(tr_x)} train / {len(te_x)} test images (npm bundle)")
    return True


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data"))
    args = ap.parse_args()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    done = all((out_dir / f.removesuffix(".gz")).exists() for f in FILES)
    if done:
        print(f"{out_dir} already populated")
        return 0
    print("trying canonical mirrors:")
    if fetch_canonical(out_dir):
        print("fetched canonical MNIST")
        return 0
    print("falling back to npm mnist bundle:")
    if fetch_npm_bundle(out_dir):
        return 0
    print("ERROR: no data source reachable", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
