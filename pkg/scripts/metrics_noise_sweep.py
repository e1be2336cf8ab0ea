#!/usr/bin/env python3
"""SSIM, MS-SSIM and FSIM of a test image against noisy copies of itself.

    python3 scripts/metrics_noise_sweep.py --sigmas 0.01 0.05 0.1
    python3 scripts/metrics_noise_sweep.py --image photo.png --out sweep.csv
"""

import argparse
import csv
import sys

import numpy as np

from morphface.io import load_image
from morphface.metrics import metric_report


def reference_image(path):
    if path:
        return load_image(path)
    from skimage import data  # optional; only needed without --image

    return data.camera() / 255.0


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--image", help="PNG/PPM/PGM image (default: scikit-image's camera)")
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.01, 0.02, 0.05, 0.1, 0.2])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="CSV path (default: stdout)")
    args = ap.parse_args()

    image = reference_image(args.image)
    noise = np.random.default_rng(args.seed).normal(size=image.shape)
    rows = []
    for sigma in args.sigmas:
        rep = metric_report(image, np.clip(image + sigma * noise, 0.0, 1.0))
        rows.append([sigma, rep.ssim, rep.ms_ssim, rep.fsim])

    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sigma", "ssim", "ms_ssim", "fsim"])
        w.writerows([[f"{v:.6g}" for v in r] for r in rows])
    finally:
        if args.out:
            fh.close()


if __name__ == "__main__":
    main()
